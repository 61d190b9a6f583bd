//! Euclidean projection onto a polytope `{z : Ez = e, Gz <= h}` by a dense
//! active-set method, plus a power-iteration spectral norm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inequality/equality description of a polytope.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl Polytope {
    pub fn dim(&self) -> usize {
        self.ineq.ncols().max(self.eq.ncols())
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        let eq_ok = (0..self.eq.nrows()).all(|r| {
            ((self.eq.row(r) * z)[(0, 0)] - self.eq_rhs[r]).abs() <= tol
        });
        let ineq_ok = (0..self.ineq.nrows()).all(|r| {
            (self.ineq.row(r) * z)[(0, 0)] - self.ineq_rhs[r] <= tol
        });
        eq_ok && ineq_ok
    }
}

const FEAS_TOL: f64 = 1e-11;
const SVD_EPS: f64 = 1e-12;

/// Stacked equality + working inequality rows, with pseudo-inverse products
/// computed through one SVD.
struct WorkingSet<'a> {
    poly: &'a Polytope,
    rows: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl<'a> WorkingSet<'a> {
    fn new(poly: &'a Polytope) -> Self {
        let n_eq = poly.eq.nrows();
        let mut matrix = DMatrix::zeros(n_eq, poly.dim());
        for r in 0..n_eq {
            matrix.row_mut(r).copy_from(&poly.eq.row(r));
        }
        Self { poly, rows: Vec::new(), matrix }
    }

    fn rebuild(&mut self) {
        let n_eq = self.poly.eq.nrows();
        let mut matrix = DMatrix::zeros(n_eq + self.rows.len(), self.poly.dim());
        for r in 0..n_eq {
            matrix.row_mut(r).copy_from(&self.poly.eq.row(r));
        }
        for (k, &w) in self.rows.iter().enumerate() {
            matrix.row_mut(n_eq + k).copy_from(&self.poly.ineq.row(w));
        }
        self.matrix = matrix;
    }

    fn push(&mut self, row: usize) {
        self.rows.push(row);
        self.rebuild();
    }

    fn remove(&mut self, k: usize) {
        self.rows.remove(k);
        self.rebuild();
    }

    /// `(normal - M^T (M M^T)^+ M normal, (M M^T)^+ M normal)`: the component
    /// of `normal` orthogonal to the active rows, and the rate at which the
    /// active multipliers absorb a unit of the entering one.
    fn split(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        if self.matrix.nrows() == 0 {
            return (normal.clone(), DVector::zeros(0));
        }
        let gram = &self.matrix * self.matrix.transpose();
        let b = &self.matrix * normal;
        let rate = gram
            .svd(true, true)
            .solve(&b, SVD_EPS)
            .expect("SVD solve of a Gram matrix");
        let residual = normal - self.matrix.transpose() * &rate;
        (residual, rate)
    }

    /// Exact projection of `point` onto the active rows at their levels.
    fn snap(&self, point: &DVector<f64>) -> DVector<f64> {
        if self.matrix.nrows() == 0 {
            return point.clone();
        }
        let n_eq = self.poly.eq.nrows();
        let mut levels = DVector::zeros(self.matrix.nrows());
        for r in 0..n_eq {
            levels[r] = self.poly.eq_rhs[r];
        }
        for (k, &w) in self.rows.iter().enumerate() {
            levels[n_eq + k] = self.poly.ineq_rhs[w];
        }
        let gram = &self.matrix * self.matrix.transpose();
        let b = &self.matrix * point - levels;
        let nu = gram
            .svd(true, true)
            .solve(&b, SVD_EPS)
            .expect("SVD solve of a Gram matrix");
        point - self.matrix.transpose() * nu
    }
}

/// Project `point` onto the polytope: `argmin |z - point|^2`.
///
/// Dual active-set iteration: starting from the projection onto the
/// equalities, repeatedly bring in the most violated inequality, taking
/// partial steps that drop any working row whose multiplier would turn
/// negative. The working rows stay linearly independent throughout, and the
/// final point is snapped onto them, so the returned projection satisfies its
/// KKT system to solve precision (~1e-10).
pub fn project_polytope(poly: &Polytope, point: &DVector<f64>) -> Result<DVector<f64>> {
    let n_eq = poly.eq.nrows();
    let n_ineq = poly.ineq.nrows();
    let max_steps = 50 * (n_eq + n_ineq + 1);

    let mut working = WorkingSet::new(poly);
    let mut z = working.snap(point);
    let mut multipliers: Vec<f64> = Vec::new();
    let mut steps = 0;
    'outer: loop {
        // most violated inequality
        let mut entering = None;
        let mut worst = 0.0f64;
        for r in 0..n_ineq {
            let viol = (poly.ineq.row(r) * &z)[(0, 0)] - poly.ineq_rhs[r];
            if viol > FEAS_TOL * (1.0 + poly.ineq_rhs[r].abs()) && viol > worst {
                entering = Some(r);
                worst = viol;
            }
        }
        let Some(p) = entering else {
            if !poly.contains(&z, 1e-8) {
                return Err(Error::InfeasiblePriceSet);
            }
            // re-projecting the original point onto the settled working set
            // strips the drift accumulated over the partial steps
            return Ok(working.snap(point));
        };
        let normal = poly.ineq.row(p).transpose();
        let mut entering_multiplier = 0.0;
        loop {
            steps += 1;
            if steps > max_steps {
                return Err(Error::MaxActiveSetIters(max_steps));
            }
            let (direction, rate) = working.split(&normal);
            let dir_norm2 = direction.norm_squared();
            // full step: entering row reaches its level
            let gap = (poly.ineq.row(p) * &z)[(0, 0)] - poly.ineq_rhs[p];
            let full = if dir_norm2 > SVD_EPS { gap / dir_norm2 } else { f64::INFINITY };
            // partial step: first working multiplier driven to zero
            let mut partial = f64::INFINITY;
            let mut blocking = None;
            for (k, &mult) in multipliers.iter().enumerate() {
                let r = rate[n_eq + k];
                if r > SVD_EPS {
                    let t = mult / r;
                    if t < partial {
                        partial = t;
                        blocking = Some(k);
                    }
                }
            }
            if !full.is_finite() && !partial.is_finite() {
                return Err(Error::InfeasiblePriceSet);
            }
            let t = full.min(partial);
            if t > 0.0 {
                z -= t * &direction;
                for (k, mult) in multipliers.iter_mut().enumerate() {
                    *mult -= t * rate[n_eq + k];
                }
                entering_multiplier += t;
            }
            if full <= partial {
                working.push(p);
                multipliers.push(entering_multiplier);
                continue 'outer;
            }
            let k = blocking.expect("a finite partial step names its blocking row");
            working.remove(k);
            multipliers.remove(k);
        }
    }
}

/// Largest singular value of `m`, by power iteration on `m^T m`.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    // deterministic start with a ramp so it is never orthogonal to the top eigenvector
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * (i as f64 + 1.0));
    v /= v.norm();
    let mut prev = 0.0;
    for _ in 0..100_000 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (norm - prev).abs() <= tol * norm.max(1.0) {
            return norm.sqrt();
        }
        prev = norm;
    }
    prev.sqrt()
}
