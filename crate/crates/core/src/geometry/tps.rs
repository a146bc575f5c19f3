//! Thin-plate-spline plumbing over a fixed regular control grid.
//!
//! The spline maps each control point `c_k` to `c_k + d_k`. Because the
//! control points never move, the system matrix is constant and its inverse
//! is computed once; the coefficients are then linear in the displacements.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Extent of the control grid in normalized coordinates.
pub const CONTROL_EXTENT: f64 = 0.9;

/// Radial kernel `U(r) = r² log r²`, taking the squared distance.
pub fn radial_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Regular `grid×grid` control points over `[-0.9, 0.9]²`, row-major in y.
pub fn control_points(grid: usize) -> Vec<[f64; 2]> {
    let coord = |i: usize| {
        if grid == 1 {
            0.0
        } else {
            -CONTROL_EXTENT + 2.0 * CONTROL_EXTENT * i as f64 / (grid - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            pts.push([coord(j), coord(i)]);
        }
    }
    pts
}

/// Full TPS system matrix
/// `[[U(|c_i - c_j|), 1, x_i, y_i], [1ᵀ; xᵀ; yᵀ, 0]]` of size `(K+3)²`.
fn system_matrix(points: &[[f64; 2]]) -> DMatrix<f64> {
    let k = points.len();
    let mut l = DMatrix::<f64>::zeros(k + 3, k + 3);
    for i in 0..k {
        for j in 0..k {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            l[(i, j)] = radial_kernel(dx * dx + dy * dy);
        }
        let row = [1.0, points[i][0], points[i][1]];
        for (c, v) in row.into_iter().enumerate() {
            l[(i, k + c)] = v;
            l[(k + c, i)] = v;
        }
    }
    l
}

/// Precomputed solver for a fixed control grid.
#[derive(Clone, Debug)]
pub struct TpsSolver {
    pub points: Vec<[f64; 2]>,
    /// First `K` columns of the inverse system matrix, `(K+3)×K`, row-major.
    /// Coefficients are `solve · targets` since the last three rows of the
    /// right-hand side are zero.
    pub solve: Vec<f64>,
}

impl TpsSolver {
    pub fn new(grid: usize) -> Result<Self> {
        let points = control_points(grid);
        let k = points.len();
        let l = system_matrix(&points);
        let svd = l.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if k < 3 || !(smin > smax * 1e-12) {
            return Err(Error::singular(
                format!("TPS system with {k} control points is rank-deficient"),
                vec![],
            ));
        }
        let inv = l
            .try_inverse()
            .ok_or_else(|| Error::singular("TPS system is not invertible", vec![]))?;
        let mut solve = Vec::with_capacity((k + 3) * k);
        for r in 0..k + 3 {
            for c in 0..k {
                solve.push(inv[(r, c)]);
            }
        }
        Ok(Self { points, solve })
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Basis row for evaluating the spline at `(x, y)`:
    /// `[U(|p - c_1|), …, U(|p - c_K|), 1, x, y]`.
    pub fn basis_row(&self, x: f64, y: f64, out: &mut Vec<f64>) {
        for c in &self.points {
            let dx = x - c[0];
            let dy = y - c[1];
            out.push(radial_kernel(dx * dx + dy * dy));
        }
        out.extend_from_slice(&[1.0, x, y]);
    }
}
