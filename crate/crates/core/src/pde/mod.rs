//! Finite differences for the regularized dual equation, the map to the primal value
//! function, and the residual checks of the primal HJB equation.
//!
//! Surfaces live on a uniform time grid, a log-uniform grid in each stock (d <= 2),
//! and a uniform grid in either the dual variable `q` or the probability `p`.

mod dual;
mod hjb;
mod io;
mod primal;

use serde::{Deserialize, Serialize};

pub use crate::duality::Domain;
use crate::error::{Error, Result};
pub use dual::{solve_dual_pde, SolveOptions, SolveReport};
pub use hjb::{
    compare_candidates, default_tolerance, hjb_residual, verify_supersolution, Comparison, HjbResidual, NodeStatus, ResidualWindow,
    SupersolutionReport, VerifyOptions,
};
pub use io::{read_surface, read_surface_csv, write_surface, write_surface_csv, SURFACE_SCHEMA_VERSION};
pub use primal::{conjugate_slice, dual_to_primal, PrimalOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    pub horizon: f64,
    /// Number of time nodes, both ends included.
    pub n_t: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    /// Nodes per stock, log-uniform on `[x_min, x_max]`.
    pub n_x: Vec<usize>,
    /// Whether the last axis is `q` or `p`.
    pub axis: Domain,
    pub axis_min: f64,
    pub axis_max: f64,
    pub n_axis: usize,
    pub epsilon: f64,
}

impl GridSpec {
    /// One-stock grid with a `q` axis.
    pub fn dual_1d(horizon: f64, n_t: usize, x: (f64, f64), n_x: usize, q: (f64, f64), n_q: usize, epsilon: f64) -> Self {
        Self {
            t0: 0.0,
            horizon,
            n_t,
            x_min: vec![x.0],
            x_max: vec![x.1],
            n_x: vec![n_x],
            axis: Domain::Q,
            axis_min: q.0,
            axis_max: q.1,
            n_axis: n_q,
            epsilon,
        }
    }

    /// The same grid with the last axis replaced by `n_p` uniform `p` nodes on `[0, 1]`.
    pub fn with_p_axis(&self, n_p: usize) -> Self {
        Self { axis: Domain::P, axis_min: 0.0, axis_max: 1.0, n_axis: n_p, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_x.len();
        if d == 0 || self.x_min.len() != d || self.x_max.len() != d {
            return Err(Error::InvalidGrid("x_min, x_max and n_x must have one entry per stock".into()));
        }
        if d > 2 {
            return Err(Error::DimensionUnsupported(d));
        }
        if !(self.t0 < self.horizon) || !self.t0.is_finite() || !self.horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("need t0 < T, got [{}, {}]", self.t0, self.horizon)));
        }
        if self.n_t < 3 || self.n_axis < 3 || self.n_x.iter().any(|&n| n < 3) {
            return Err(Error::InvalidGrid("every axis needs at least 3 nodes".into()));
        }
        for i in 0..d {
            if !(self.x_min[i] > 0.0 && self.x_max[i] > self.x_min[i] && self.x_max[i].is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "need 0 < x_min < x_max, got [{}, {}]",
                    self.x_min[i], self.x_max[i]
                )));
            }
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidGrid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        let ok_axis = match self.axis {
            Domain::Q => self.axis_min >= 0.0 && self.axis_max > self.axis_min && self.axis_max.is_finite(),
            Domain::P => self.axis_min >= 0.0 && self.axis_max <= 1.0 && self.axis_max > self.axis_min,
        };
        if !ok_axis {
            return Err(Error::InvalidGrid(format!(
                "{} axis [{}, {}] is invalid",
                self.axis.label(),
                self.axis_min,
                self.axis_max
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n_x.len()
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / (self.n_t - 1) as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i + 1 == self.n_t {
            self.horizon
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    /// Log spacing of stock `k`.
    pub fn dy(&self, k: usize) -> f64 {
        (self.x_max[k] / self.x_min[k]).ln() / (self.n_x[k] - 1) as f64
    }

    pub fn y_nodes(&self, k: usize) -> Vec<f64> {
        let (lo, h) = (self.x_min[k].ln(), self.dy(k));
        (0..self.n_x[k]).map(|i| lo + i as f64 * h).collect()
    }

    pub fn x_nodes(&self, k: usize) -> Vec<f64> {
        let mut xs: Vec<f64> = self.y_nodes(k).iter().map(|y| y.exp()).collect();
        xs[0] = self.x_min[k];
        let last = xs.len() - 1;
        xs[last] = self.x_max[k];
        xs
    }

    pub fn da(&self) -> f64 {
        (self.axis_max - self.axis_min) / (self.n_axis - 1) as f64
    }

    pub fn axis_nodes(&self) -> Vec<f64> {
        let h = self.da();
        let mut v: Vec<f64> = (0..self.n_axis).map(|i| self.axis_min + i as f64 * h).collect();
        v[self.n_axis - 1] = self.axis_max;
        v
    }

    /// Number of spatial nodes.
    pub fn n_space(&self) -> usize {
        self.n_x.iter().product()
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_space() * self.n_axis
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat spatial index; the last stock varies fastest.
    pub fn space_index(&self, ix: &[usize]) -> usize {
        ix.iter().zip(&self.n_x).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn space_multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            out[k] = flat % self.n_x[k];
            flat /= self.n_x[k];
        }
        out
    }

    /// Stock vector at a flat spatial index.
    pub fn x_at(&self, flat: usize) -> Vec<f64> {
        let ix = self.space_multi_index(flat);
        ix.iter()
            .enumerate()
            .map(|(k, &i)| if i == 0 { self.x_min[k] } else if i + 1 == self.n_x[k] { self.x_max[k] } else { (self.x_min[k].ln() + i as f64 * self.dy(k)).exp() })
            .collect()
    }

    pub fn index(&self, it: usize, ix: usize, ia: usize) -> usize {
        (it * self.n_space() + ix) * self.n_axis + ia
    }

    /// True if both grids share every node.
    pub fn same_nodes(&self, other: &GridSpec) -> bool {
        self.t0 == other.t0
            && self.horizon == other.horizon
            && self.n_t == other.n_t
            && self.x_min == other.x_min
            && self.x_max == other.x_max
            && self.n_x == other.n_x
            && self.axis == other.axis
            && self.axis_min == other.axis_min
            && self.axis_max == other.axis_max
            && self.n_axis == other.n_axis
    }
}

/// Values on a [`GridSpec`], flat in `(t, x, axis)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    /// Sorted flat indices whose value is unreliable because the `q` window was too narrow.
    pub truncated: Vec<usize>,
    pub model: String,
    pub payoff: String,
}

impl Surface {
    pub fn new(grid: GridSpec, values: Vec<f64>, model: impl Into<String>, payoff: impl Into<String>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("expected {} values, got {}", grid.len(), values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("value {i} is not finite")));
        }
        Ok(Self { grid, values, truncated: Vec::new(), model: model.into(), payoff: payoff.into() })
    }

    pub fn get(&self, it: usize, ix: usize, ia: usize) -> f64 {
        self.values[self.grid.index(it, ix, ia)]
    }

    pub fn slice(&self, it: usize, ix: usize) -> &[f64] {
        let start = self.grid.index(it, ix, 0);
        &self.values[start..start + self.grid.n_axis]
    }

    pub fn is_truncated(&self, flat: usize) -> bool {
        self.truncated.binary_search(&flat).is_ok()
    }

    /// Returns a copy with every value mapped through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Multilinear interpolation in `(t, ln x, axis)`, clamped to the grid.
    pub fn interpolate(&self, t: f64, x: &[f64], a: f64) -> f64 {
        let g = &self.grid;
        let locate = |v: f64, lo: f64, h: f64, n: usize| -> (usize, f64) {
            let s = ((v - lo) / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        let (it, ft) = locate(t, g.t0, g.dt(), g.n_t);
        let (ia, fa) = locate(a, g.axis_min, g.da(), g.n_axis);
        let d = g.dim();
        let mut ix = vec![(0usize, 0.0f64); d];
        for k in 0..d {
            ix[k] = locate(x[k].ln(), g.x_min[k].ln(), g.dy(k), g.n_x[k]);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << (d + 2)) {
            let bt = corner & 1;
            let ba = (corner >> 1) & 1;
            let mut w = if bt == 1 { ft } else { 1.0 - ft };
            w *= if ba == 1 { fa } else { 1.0 - fa };
            let mut idx = Vec::with_capacity(d);
            for (k, &(i, f)) in ix.iter().enumerate() {
                let b = (corner >> (2 + k)) & 1;
                w *= if b == 1 { f } else { 1.0 - f };
                idx.push(i + b);
            }
            if w != 0.0 {
                acc += w * self.get(it + bt, g.space_index(&idx), ia + ba);
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        let g = GridSpec::dual_1d(1.0, 5, (0.25, 4.0), 9, (0.0, 4.0), 9, 0.1);
        assert!(g.validate().is_ok());
        assert_eq!(g.x_nodes(0)[4], 1.0);
        assert_eq!(g.axis_nodes()[8], 4.0);
        let mut bad = g.clone();
        bad.x_min[0] = 0.0;
        assert!(matches!(bad.validate(), Err(Error::InvalidGrid(_))));
        let mut bad = g.clone();
        bad.n_t = 2;
        assert!(bad.validate().is_err());
        let mut bad = g.clone();
        bad.n_x = vec![3, 3, 3];
        bad.x_min = vec![1.0; 3];
        bad.x_max = vec![2.0; 3];
        assert!(matches!(bad.validate(), Err(Error::DimensionUnsupported(3))));
    }

    #[test]
    fn interpolation_is_exact_on_multilinear_data() {
        let mut g = GridSpec::dual_1d(1.0, 5, (0.5, 2.0), 7, (0.0, 1.0), 6, 0.0);
        g.axis = Domain::P;
        let mut values = vec![0.0; g.len()];
        for it in 0..g.n_t {
            for ix in 0..7 {
                for ia in 0..6 {
                    let (t, y, p) = (g.t(it), g.x_at(ix)[0].ln(), g.axis_nodes()[ia]);
                    values[g.index(it, ix, ia)] = 1.0 + 2.0 * t - y + 3.0 * p + t * p;
                }
            }
        }
        let s = Surface::new(g, values, "m", "g").unwrap();
        let (t, x, p) = (0.33, 1.3_f64, 0.47);
        let exact = 1.0 + 2.0 * t - x.ln() + 3.0 * p + t * p;
        assert!((s.interpolate(t, &[x], p) - exact).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_indexing() {
        let g = GridSpec {
            t0: 0.0,
            horizon: 1.0,
            n_t: 3,
            x_min: vec![0.5, 1.0],
            x_max: vec![2.0, 4.0],
            n_x: vec![3, 5],
            axis: Domain::Q,
            axis_min: 0.0,
            axis_max: 2.0,
            n_axis: 4,
            epsilon: 0.1,
        };
        assert_eq!(g.n_space(), 15);
        let flat = g.space_index(&[2, 3]);
        assert_eq!(g.space_multi_index(flat), vec![2, 3]);
        assert_eq!(g.x_at(flat)[0], 2.0);
    }
}
