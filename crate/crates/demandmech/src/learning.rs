//! Price-adjustment learning dynamic: dual projected gradient descent over the
//! proper-price polytope, converging to the Nash equilibrium of the
//! centralized mechanism.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mech_central::{CentralMessage, CentralMessageProfile};
use crate::model::{sample_feasible, Instance};
use crate::projection::{project_polytope, spectral_norm, Polytope};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dual-feasible price polytope: nonnegative prices whose induced marginal
/// prices stay within the per-coordinate derivative bounds, with the peak
/// components summing to the peak price.
#[derive(Debug, Clone)]
pub struct PriceSet {
    a_tilde: DMatrix<f64>,
    p_tilde: DVector<f64>,
    r_lo: DVector<f64>,
    r_hi: DVector<f64>,
    p0: f64,
    n_lambda: usize,
    n_mu: usize,
    poly: Polytope,
}

impl PriceSet {
    /// Build the price set from explicit N x T derivative bounds.
    /// Nonemptiness is established by projecting the origin.
    pub fn from_bounds(inst: &Instance, r_lo: &DMatrix<f64>, r_hi: &DMatrix<f64>) -> Result<Self> {
        let (n, t, l) = (inst.n_users(), inst.horizon(), inst.n_constraints());
        if r_lo.shape() != (n, t) || r_hi.shape() != (n, t) {
            return Err(Error::DimensionMismatch(format!(
                "derivative bounds must be {n} x {t} matrices"
            )));
        }
        let nt = n * t;
        let dim = l + t;
        // a_tilde stacks A over the block that sums users per slot
        let mut a_tilde = DMatrix::zeros(dim, nt);
        a_tilde.view_mut((0, 0), (l, nt)).copy_from(inst.constraint_matrix());
        for i in 0..n {
            for slot in 0..t {
                a_tilde[(l + slot, i * t + slot)] = 1.0;
            }
        }
        let p_tilde = DVector::from_fn(nt, |c, _| inst.unit_price(c % t));
        let r_lo_flat = DVector::from_fn(nt, |c, _| r_lo[(c / t, c % t)]);
        let r_hi_flat = DVector::from_fn(nt, |c, _| r_hi[(c / t, c % t)]);
        if r_lo_flat.iter().zip(r_hi_flat.iter()).any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi)
        {
            return Err(Error::Scenario("derivative bounds must be finite with lo <= hi".into()));
        }

        // eq: sum of mu entries = p0; ineq: z >= 0 and the two-sided box rows
        let mut eq = DMatrix::zeros(1, dim);
        for slot in 0..t {
            eq[(0, l + slot)] = 1.0;
        }
        let mut ineq = DMatrix::zeros(dim + 2 * nt, dim);
        let mut ineq_rhs = DVector::zeros(dim + 2 * nt);
        for r in 0..dim {
            ineq[(r, r)] = -1.0;
        }
        let at_t = a_tilde.transpose();
        ineq.view_mut((dim, 0), (nt, dim)).copy_from(&at_t);
        ineq.view_mut((dim + nt, 0), (nt, dim)).copy_from(&(-&at_t));
        for c in 0..nt {
            ineq_rhs[dim + c] = r_hi_flat[c] - p_tilde[c];
            ineq_rhs[dim + nt + c] = p_tilde[c] - r_lo_flat[c];
        }
        let poly = Polytope {
            eq,
            eq_rhs: DVector::from_element(1, inst.peak_price()),
            ineq,
            ineq_rhs,
        };
        let set = Self {
            a_tilde,
            p_tilde,
            r_lo: r_lo_flat,
            r_hi: r_hi_flat,
            p0: inst.peak_price(),
            n_lambda: l,
            n_mu: t,
            poly,
        };
        // nonemptiness check
        set.project(&DVector::zeros(dim)).map_err(|_| Error::InfeasiblePriceSet)?;
        Ok(set)
    }

    /// Derivative bounds implied by the utility domains:
    /// `r_lo = v'(domain_hi)`, `r_hi = v'(domain_lo)`.
    pub fn from_domain(inst: &Instance) -> Result<Self> {
        let lo = DMatrix::from_fn(inst.n_users(), inst.horizon(), |i, t| {
            inst.utility(i, t).derivative_range().0
        });
        let hi = DMatrix::from_fn(inst.n_users(), inst.horizon(), |i, t| {
            inst.utility(i, t).derivative_range().1
        });
        Self::from_bounds(inst, &lo, &hi)
    }

    pub fn dim(&self) -> usize {
        self.n_lambda + self.n_mu
    }

    pub fn n_lambda(&self) -> usize {
        self.n_lambda
    }

    pub fn n_mu(&self) -> usize {
        self.n_mu
    }

    pub fn a_tilde(&self) -> &DMatrix<f64> {
        &self.a_tilde
    }

    pub fn peak_price(&self) -> f64 {
        self.p0
    }

    pub fn membership(&self, prices: &DVector<f64>, tol: f64) -> bool {
        if prices.len() != self.dim() {
            return false;
        }
        let marginal = self.a_tilde.transpose() * prices + &self.p_tilde;
        prices.iter().all(|v| *v >= -tol)
            && (0..marginal.len())
                .all(|c| marginal[c] >= self.r_lo[c] - tol && marginal[c] <= self.r_hi[c] + tol)
            && (prices.rows(self.n_lambda, self.n_mu).sum() - self.p0).abs() <= tol
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, point: &DVector<f64>) -> Result<DVector<f64>> {
        project_polytope(&self.poly, point)
    }

    /// Marginal price vector `A~^T z + p~` seen by each (user, slot) coordinate.
    pub fn marginal_prices(&self, prices: &DVector<f64>) -> DVector<f64> {
        self.a_tilde.transpose() * prices + &self.p_tilde
    }
}

/// Euclidean projection onto the proper-price set.
pub fn project_onto_price_set(set: &PriceSet, point: &DVector<f64>) -> Result<DVector<f64>> {
    set.project(point)
}

/// Strong-concavity parameter of the community objective: the coordinate-wise
/// minimum of `inf -v''` over each utility's domain.
pub fn strong_concavity_parameter(inst: &Instance) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in 0..inst.n_users() {
        for t in 0..inst.horizon() {
            let floor = inst.utility(i, t).curvature_floor();
            if !(floor > 0.0) {
                return Err(Error::NotStronglyConcave { user: i, slot: t });
            }
            best = best.min(floor);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct BoundsReport {
    /// Feasible points probed (samples, the origin, and per-coordinate extremes).
    pub probes_checked: usize,
}

/// Validate per-coordinate derivative bounds: every feasible demand keeps
/// `v'` inside `[r_lo, r_hi]` (checked on sampled feasible points, the origin,
/// and each coordinate pushed to its feasibility extreme), and both endpoints
/// are invertible through `(v')^{-1}`.
pub fn validate_derivative_bounds(
    inst: &Instance,
    r_lo: &DMatrix<f64>,
    r_hi: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<BoundsReport> {
    let (n, t) = (inst.n_users(), inst.horizon());
    if r_lo.shape() != (n, t) || r_hi.shape() != (n, t) {
        return Err(Error::DimensionMismatch(format!("bounds must be {n} x {t}")));
    }
    // condition 2: endpoints invertible
    for i in 0..n {
        for slot in 0..t {
            let u = inst.utility(i, slot);
            for bound in [r_lo[(i, slot)], r_hi[(i, slot)]] {
                if u.inverse_derivative(bound).is_err() {
                    let (_, hi_p) = u.derivative_range();
                    let x = if bound > hi_p { u.domain_lo } else { u.domain_hi };
                    return Err(Error::BoundViolation {
                        user: i,
                        slot,
                        x,
                        derivative: u.derivative_unchecked(x),
                        lo: bound,
                        hi: bound,
                    });
                }
            }
        }
    }
    // condition 1: sample feasible points plus deterministic extremes
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = vec![DMatrix::zeros(n, t)];
    probes.extend(sample_feasible(inst, samples, &mut rng));
    let mut checked = 0;
    let tol = 1e-9;
    for x in &probes {
        let slacks = inst.slacks(x);
        for i in 0..n {
            for slot in 0..t {
                let u = inst.utility(i, slot);
                // how far this coordinate can move while staying feasible and in-domain
                let mut up = u.domain_hi - x[(i, slot)];
                let mut down = x[(i, slot)] - u.domain_lo;
                for l in 0..inst.n_constraints() {
                    let a = inst.coeff(l, i, slot);
                    if a > 0.0 {
                        up = up.min(slacks[l] / a);
                    } else if a < 0.0 {
                        down = down.min(slacks[l] / -a);
                    }
                }
                for probe in [x[(i, slot)], x[(i, slot)] + up.max(0.0), x[(i, slot)] - down.max(0.0)]
                {
                    let d = u.derivative_unchecked(probe);
                    checked += 1;
                    if d < r_lo[(i, slot)] - tol || d > r_hi[(i, slot)] + tol {
                        return Err(Error::BoundViolation {
                            user: i,
                            slot,
                            x: probe,
                            derivative: d,
                            lo: r_lo[(i, slot)],
                            hi: r_hi[(i, slot)],
                        });
                    }
                }
            }
        }
    }
    Ok(BoundsReport { probes_checked: checked })
}

/// Demands induced by a dual price vector: `x^i_t = (v')^{-1}` of the marginal price.
pub fn recover_demands(inst: &Instance, prices: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (n, t, l) = (inst.n_users(), inst.horizon(), inst.n_constraints());
    if prices.len() != l + t {
        return Err(Error::DimensionMismatch(format!(
            "price vector has length {}, expected {}",
            prices.len(),
            l + t
        )));
    }
    let mut x = DMatrix::zeros(n, t);
    for i in 0..n {
        for slot in 0..t {
            let mut p = inst.unit_price(slot) + prices[l + slot];
            for row in 0..l {
                p += prices[row] * inst.coeff(row, i, slot);
            }
            x[(i, slot)] = inst.utility(i, slot).inverse_derivative(p)?;
        }
    }
    Ok(x)
}

/// Dual objective `b^T lambda + h*(-A~^T lambda~)`, evaluated through the
/// conjugate's maximizer.
pub fn dual_value(inst: &Instance, prices: &DVector<f64>) -> Result<f64> {
    let l = inst.n_constraints();
    let x = recover_demands(inst, prices)?;
    let mut total = 0.0;
    for row in 0..l {
        total += inst.constraint_rhs()[row] * prices[row];
    }
    for i in 0..inst.n_users() {
        for slot in 0..inst.horizon() {
            let mut p = inst.unit_price(slot) + prices[l + slot];
            for row in 0..l {
                p += prices[row] * inst.coeff(row, i, slot);
            }
            total += inst.utility(i, slot).value(x[(i, slot)])? - p * x[(i, slot)];
        }
    }
    Ok(total)
}

/// One dual PGD step: gradient on the row slacks, then projection.
/// Shared by the learning dynamic and the centralized solver.
pub fn dual_pgd_step(
    inst: &Instance,
    set: &PriceSet,
    prices: &DVector<f64>,
    alpha: f64,
    demands: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let l = inst.n_constraints();
    let t = inst.horizon();
    let totals = inst.slot_totals(demands);
    let mut stepped = prices.clone();
    for row in 0..l {
        stepped[row] -= alpha * (inst.constraint_rhs()[row] - inst.row_dot(row, demands));
    }
    for slot in 0..t {
        stepped[l + slot] += alpha * totals[slot];
    }
    set.project(&stepped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    /// Message profile moved by no more than `stop_tol` at this iteration.
    Converged { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub k: usize,
    /// Common constraint prices q^l(k) (identical across users).
    pub q: DVector<f64>,
    /// Common peak prices s_t(k).
    pub s: DVector<f64>,
    /// Announced demands y^i_t(k).
    pub y: DMatrix<f64>,
    /// Distance of (q, s)(k) to the supplied reference optimum.
    pub dist_to_opt: Option<f64>,
    pub dual_value: f64,
}

#[derive(Debug, Clone)]
pub struct LearningTrace {
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
    pub alpha: f64,
    pub spectral_norm: f64,
    pub delta_prime: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LearnConfig {
    /// Step size; defaults to `delta' / |A~|`.
    pub alpha: Option<f64>,
    pub max_iters: usize,
    pub stop_tol: f64,
    /// Initial common prices, defaulting to the projection of the origin.
    pub initial: Option<DVector<f64>>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self { alpha: None, max_iters: 100, stop_tol: 0.0, initial: None }
    }
}

/// Run the price-adjustment dynamic: every user starts from the same initial
/// prices, updates them with the shared demand announcements, projects onto
/// the price set and re-announces demand; proxies are filled in on exit.
///
/// `reference` (the optimal `(q*, s*)` when known) only feeds the per-iteration
/// distance diagnostic.
pub fn learn(
    inst: &Instance,
    set: &PriceSet,
    cfg: &LearnConfig,
    reference: Option<&DVector<f64>>,
) -> Result<(CentralMessageProfile, LearningTrace)> {
    let n = inst.n_users();
    let l = inst.n_constraints();
    let t = inst.horizon();
    let delta_prime = strong_concavity_parameter(inst)?;
    let norm = spectral_norm(set.a_tilde(), 1e-10);
    let alpha = match cfg.alpha {
        Some(a) => a,
        None if norm > 0.0 => delta_prime / norm,
        None => delta_prime,
    };
    assert!(alpha > 0.0, "step size must be positive");
    let mut warnings = Vec::new();
    if norm > 0.0 && alpha > 2.0 * delta_prime / norm + 1e-15 {
        warnings.push(format!(
            "step size {alpha} exceeds 2*delta'/|A~| = {}; convergence is not guaranteed",
            2.0 * delta_prime / norm
        ));
    }

    let initial = match &cfg.initial {
        Some(p) => {
            if !set.membership(p, 1e-9) {
                return Err(Error::Scenario("initial prices are not in the price set".into()));
            }
            p.clone()
        }
        None => set.project(&DVector::zeros(l + t))?,
    };

    // one price vector per user; all users run the identical update
    let mut prices: Vec<DVector<f64>> = vec![initial; n];
    let mut demands = DMatrix::zeros(n, t);
    for i in 0..n {
        let own = recover_demands(inst, &prices[i])?;
        demands.set_row(i, &own.row(i));
    }

    let record = |k: usize, prices: &[DVector<f64>], demands: &DMatrix<f64>| -> Result<TraceRecord> {
        let common = &prices[0];
        Ok(TraceRecord {
            k,
            q: common.rows(0, l).into_owned(),
            s: common.rows(l, t).into_owned(),
            y: demands.clone(),
            dist_to_opt: reference.map(|r| (common - r).norm()),
            dual_value: dual_value(inst, common)?,
        })
    };

    let mut records = vec![record(0, &prices, &demands)?];
    let mut stop = StopReason::MaxIters;
    for k in 1..=cfg.max_iters {
        let mut next_prices = Vec::with_capacity(n);
        let mut next_demands = DMatrix::zeros(n, t);
        for i in 0..n {
            let updated = dual_pgd_step(inst, set, &prices[i], alpha, &demands)?;
            let own = recover_demands(inst, &updated)?;
            next_demands.set_row(i, &own.row(i));
            next_prices.push(updated);
        }
        debug_assert!(
            next_prices.iter().all(|p| p == &next_prices[0]),
            "identical updates must keep per-user prices bit-equal"
        );
        let moved = profile_delta(&prices, &demands, &next_prices, &next_demands);
        prices = next_prices;
        demands = next_demands;
        records.push(record(k, &prices, &demands)?);
        if moved <= cfg.stop_tol {
            stop = StopReason::Converged { iteration: k };
            break;
        }
    }

    let mut users = Vec::with_capacity(n);
    // projection round-off can leave multipliers a hair below zero
    let snap = |v: f64| if v < 0.0 && v > -1e-9 { 0.0 } else { v };
    for i in 0..n {
        users.push(CentralMessage {
            y: demands.row(i).transpose(),
            q: prices[i].rows(0, l).map(snap),
            s: prices[i].rows(l, t).map(snap),
            beta: demands.row((i + 1) % n).transpose(),
        });
    }
    let profile = CentralMessageProfile::new(users);
    let trace = LearningTrace {
        records,
        stop,
        alpha,
        spectral_norm: norm,
        delta_prime,
        warnings,
    };
    Ok((profile, trace))
}

fn profile_delta(
    prices: &[DVector<f64>],
    demands: &DMatrix<f64>,
    next_prices: &[DVector<f64>],
    next_demands: &DMatrix<f64>,
) -> f64 {
    let mut acc = 0.0;
    for (a, b) in prices.iter().zip(next_prices) {
        acc += (a - b).norm_squared();
    }
    acc += (demands - next_demands).norm_squared();
    acc.sqrt()
}
