//! Ground-truth solver for the community welfare program and its optimality
//! certificate. The solver runs dual projected gradient descent to
//! convergence and recovers the primal point through the inverse marginal
//! utilities; `check_kkt` is the certificate every downstream test leans on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::learning::{dual_pgd_step, recover_demands, strong_concavity_parameter, PriceSet};
use crate::model::Instance;
use crate::projection::spectral_norm;

/// Primal/dual optimum of the epigraph program.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    /// Optimal demands, one row per user.
    pub x: DMatrix<f64>,
    /// Peak epigraph variable, `max_t` of the slot totals.
    pub w: f64,
    /// Multipliers for the polytope rows.
    pub lambda: DVector<f64>,
    /// Multipliers for the per-slot peak inequalities.
    pub mu: DVector<f64>,
}

impl CentralSolution {
    /// Stacked `(lambda, mu)` dual vector.
    pub fn price_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.lambda.len() + self.mu.len());
        v.rows_mut(0, self.lambda.len()).copy_from(&self.lambda);
        v.rows_mut(self.lambda.len(), self.mu.len()).copy_from(&self.mu);
        v
    }
}

#[derive(Debug, Clone)]
pub struct KktReport {
    /// Max violation of the polytope rows and the peak inequalities.
    pub primal_residual: f64,
    /// Max negative multiplier.
    pub dual_residual: f64,
    /// Max `|lambda^l e^l|` and `|mu_t g_t|` over rows and slots.
    pub comp_slackness: f64,
    /// Max stationarity defect, including the peak-price identity.
    pub stationarity_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.primal_residual
            .max(self.dual_residual)
            .max(self.comp_slackness)
            .max(self.stationarity_residual)
    }
}

/// Evaluate all four KKT residual groups at `sol`.
pub fn check_kkt(inst: &Instance, sol: &CentralSolution, tol: f64) -> KktReport {
    let l = inst.n_constraints();
    let t = inst.horizon();
    let totals = inst.slot_totals(&sol.x);

    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for row in 0..l {
        let slack = inst.constraint_rhs()[row] - inst.row_dot(row, &sol.x);
        primal = primal.max(-slack);
        comp = comp.max((sol.lambda[row] * slack).abs());
    }
    for slot in 0..t {
        let gap = sol.w - totals[slot];
        primal = primal.max(-gap);
        comp = comp.max((sol.mu[slot] * gap).abs());
    }

    let mut most_negative = 0.0f64;
    for v in sol.lambda.iter().chain(sol.mu.iter()) {
        most_negative = most_negative.min(*v);
    }
    let dual = if most_negative < 0.0 { -most_negative } else { 0.0 };

    let mut stationarity = (inst.peak_price() - sol.mu.sum()).abs();
    for i in 0..inst.n_users() {
        for slot in 0..t {
            let mut price = inst.unit_price(slot) + sol.mu[slot];
            for row in 0..l {
                price += sol.lambda[row] * inst.coeff(row, i, slot);
            }
            let defect = inst.utility(i, slot).derivative_unchecked(sol.x[(i, slot)]) - price;
            stationarity = stationarity.max(defect.abs());
        }
    }

    let residuals = [primal, dual, comp, stationarity];
    let pass = residuals.iter().all(|r| r.is_finite() && *r <= tol);
    KktReport {
        primal_residual: primal,
        dual_residual: dual,
        comp_slackness: comp,
        stationarity_residual: stationarity,
        tol,
        pass,
    }
}

/// Epigraph lift: pair the demand matrix with the peak of its slot totals.
pub fn lift_to_epigraph(x: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let w = (0..x.ncols())
        .map(|t| x.column(t).sum())
        .fold(f64::NEG_INFINITY, f64::max);
    (x.clone(), w)
}

/// Objective of the epigraph program at `(x, w)`.
pub fn epigraph_objective(inst: &Instance, x: &DMatrix<f64>, w: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..inst.n_users() {
        for t in 0..inst.horizon() {
            total += inst.utility(i, t).value(x[(i, t)])?
                - inst.unit_price(t) * x[(i, t)];
        }
    }
    Ok(total - inst.peak_price() * w)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    /// KKT residual tolerance the returned solution must satisfy.
    pub tol: f64,
    pub max_iters: usize,
    /// Dual step size; defaults to `delta' / |A~|`.
    pub step: Option<f64>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 200_000, step: None }
    }
}

fn solution_from_prices(inst: &Instance, prices: &DVector<f64>) -> Result<CentralSolution> {
    let l = inst.n_constraints();
    let t = inst.horizon();
    let x = recover_demands(inst, prices)?;
    let (_, w) = lift_to_epigraph(&x);
    // the projection leaves multipliers nonnegative only up to solve round-off
    let snap = |v: f64| if v < 0.0 && v > -1e-9 { 0.0 } else { v };
    Ok(CentralSolution {
        x,
        w,
        lambda: prices.rows(0, l).map(snap),
        mu: prices.rows(l, t).map(snap),
    })
}

/// Solve the welfare program by dual projected gradient descent over the
/// domain-implied price set, iterating until the KKT certificate holds at
/// `cfg.tol`.
pub fn solve_centralized(inst: &Instance, cfg: &SolveConfig) -> Result<CentralSolution> {
    let set = PriceSet::from_domain(inst)?;
    let alpha = match cfg.step {
        Some(a) => a,
        None => {
            let norm = spectral_norm(set.a_tilde(), 1e-10);
            let delta = strong_concavity_parameter(inst)?;
            if norm > 0.0 {
                delta / norm
            } else {
                delta
            }
        }
    };
    let mut prices = set.project(&DVector::zeros(set.dim()))?;
    let mut best: Option<(f64, CentralSolution, KktReport)> = None;
    for _ in 0..cfg.max_iters {
        let sol = solution_from_prices(inst, &prices)?;
        let report = check_kkt(inst, &sol, cfg.tol);
        if report.pass {
            return Ok(sol);
        }
        let residual = report.max_residual();
        if best.as_ref().map_or(true, |(r, _, _)| residual < *r) {
            best = Some((residual, sol.clone(), report));
        }
        prices = dual_pgd_step(inst, &set, &prices, alpha, &sol.x)?;
    }
    let sol = solution_from_prices(inst, &prices)?;
    let report = check_kkt(inst, &sol, cfg.tol);
    if report.pass {
        return Ok(sol);
    }
    let (residual, best_sol, best_report) = match best {
        Some((r, s, rep)) if r < report.max_residual() => (r, s, rep),
        _ => (report.max_residual(), sol, report),
    };
    Err(Error::NotConverged {
        iters: cfg.max_iters,
        residual,
        best: Box::new(best_sol),
        report: Box::new(best_report),
    })
}
