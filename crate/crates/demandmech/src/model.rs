//! Problem instances: users, horizon, per-slot utilities, prices and the
//! linear constraint polytope, plus the community cost and welfare evaluators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scenario::{FamilySpec, Scenario};

/// Relative slack accepted when evaluating at a domain or price boundary.
const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityFamily {
    /// `c * ln(d + x)` with weight `c > 0` and shift `d > 0`.
    ScaledLog { weight: f64, shift: f64 },
    /// `a*x - b*x^2/2` with curvature `b > 0`.
    Quadratic { slope: f64, curvature: f64 },
}

/// A single user's per-slot utility, strictly concave on `[domain_lo, domain_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityFunction {
    pub family: UtilityFamily,
    pub domain_lo: f64,
    pub domain_hi: f64,
}

impl UtilityFunction {
    pub fn scaled_log(weight: f64, shift: f64, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidUtility(format!("weight {weight} must be > 0")));
        }
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(Error::InvalidUtility(format!("shift {shift} must be > 0")));
        }
        if !(shift + domain_lo > 0.0) {
            return Err(Error::InvalidUtility(format!(
                "shift + domain_lo = {} must be > 0 for a finite log utility",
                shift + domain_lo
            )));
        }
        Self::with_domain(UtilityFamily::ScaledLog { weight, shift }, domain_lo, domain_hi)
    }

    pub fn quadratic(slope: f64, curvature: f64, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        if !(curvature > 0.0) || !curvature.is_finite() {
            return Err(Error::InvalidUtility(format!("curvature {curvature} must be > 0")));
        }
        if !slope.is_finite() {
            return Err(Error::InvalidUtility(format!("slope {slope} must be finite")));
        }
        Self::with_domain(UtilityFamily::Quadratic { slope, curvature }, domain_lo, domain_hi)
    }

    fn with_domain(family: UtilityFamily, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        if !(domain_lo < domain_hi) || !domain_lo.is_finite() || !domain_hi.is_finite() {
            return Err(Error::InvalidUtility(format!(
                "domain [{domain_lo}, {domain_hi}] must be a finite nonempty interval"
            )));
        }
        Ok(Self { family, domain_lo, domain_hi })
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let slack = BOUNDARY_SLACK * (1.0 + x.abs());
        if x < self.domain_lo - slack || x > self.domain_hi + slack || !x.is_finite() {
            return Err(Error::OutOfDomain { value: x, lo: self.domain_lo, hi: self.domain_hi });
        }
        Ok(())
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.value_unchecked(x))
    }

    pub(crate) fn value_unchecked(&self, x: f64) -> f64 {
        match self.family {
            UtilityFamily::ScaledLog { weight, shift } => weight * (shift + x).ln(),
            UtilityFamily::Quadratic { slope, curvature } => slope * x - curvature * x * x / 2.0,
        }
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.derivative_unchecked(x))
    }

    pub(crate) fn derivative_unchecked(&self, x: f64) -> f64 {
        match self.family {
            UtilityFamily::ScaledLog { weight, shift } => weight / (shift + x),
            UtilityFamily::Quadratic { slope, curvature } => slope - curvature * x,
        }
    }

    /// `(v')^{-1}(p)`, defined for `p` in `[v'(domain_hi), v'(domain_lo)]`.
    pub fn inverse_derivative(&self, p: f64) -> Result<f64> {
        let (p_lo, p_hi) = self.derivative_range();
        let slack = BOUNDARY_SLACK * (1.0 + p.abs());
        if p < p_lo - slack || p > p_hi + slack || !p.is_finite() {
            return Err(Error::OutOfDomain { value: p, lo: p_lo, hi: p_hi });
        }
        let x = match self.family {
            UtilityFamily::ScaledLog { weight, shift } => weight / p - shift,
            UtilityFamily::Quadratic { slope, curvature } => (slope - p) / curvature,
        };
        Ok(x.clamp(self.domain_lo, self.domain_hi))
    }

    /// Derivative range over the domain, as `(v'(domain_hi), v'(domain_lo))`.
    /// The derivative is strictly decreasing, so this is the valid price interval.
    pub fn derivative_range(&self) -> (f64, f64) {
        (self.derivative_unchecked(self.domain_hi), self.derivative_unchecked(self.domain_lo))
    }

    /// `inf -v''` over the domain; the per-coordinate strong-concavity constant.
    pub fn curvature_floor(&self) -> f64 {
        match self.family {
            // -v'' = c/(d+x)^2 is decreasing in x, so the inf sits at domain_hi.
            UtilityFamily::ScaledLog { weight, shift } => {
                let den = shift + self.domain_hi;
                weight / (den * den)
            }
            UtilityFamily::Quadratic { curvature, .. } => curvature,
        }
    }
}

/// A community demand-management problem.
///
/// Layout convention used everywhere in this crate: the flat column index for
/// (user `i`, slot `t`) is `i * horizon + t`, both 0-based. Scenario files and
/// rendered reports are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    n_users: usize,
    horizon: usize,
    utilities: Vec<UtilityFunction>,
    unit_prices: DVector<f64>,
    peak_price: f64,
    constraint_matrix: DMatrix<f64>,
    constraint_rhs: DVector<f64>,
    user_constraints: Vec<Vec<usize>>,
}

impl Instance {
    pub fn new(
        n_users: usize,
        horizon: usize,
        utilities: Vec<UtilityFunction>,
        unit_prices: Vec<f64>,
        peak_price: f64,
        constraint_matrix: DMatrix<f64>,
        constraint_rhs: Vec<f64>,
    ) -> Result<Self> {
        if n_users == 0 || horizon == 0 {
            return Err(Error::DimensionMismatch("need at least one user and one slot".into()));
        }
        let nt = n_users
            .checked_mul(horizon)
            .filter(|nt| *nt <= 1 << 20)
            .ok_or_else(|| Error::DimensionMismatch("n_users * horizon too large".into()))?;
        if utilities.len() != nt {
            return Err(Error::DimensionMismatch(format!(
                "expected {} utilities, got {}",
                nt,
                utilities.len()
            )));
        }
        if unit_prices.len() != horizon {
            return Err(Error::DimensionMismatch(format!(
                "expected {} unit prices, got {}",
                horizon,
                unit_prices.len()
            )));
        }
        if !(peak_price >= 0.0) || !peak_price.is_finite() {
            return Err(Error::Scenario(format!("peak price {peak_price} must be >= 0")));
        }
        if unit_prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::Scenario("unit prices must be finite".into()));
        }
        let l = constraint_matrix.nrows();
        if constraint_matrix.ncols() != nt && l > 0 {
            return Err(Error::DimensionMismatch(format!(
                "constraint matrix has {} columns, expected {}",
                constraint_matrix.ncols(),
                nt
            )));
        }
        if constraint_rhs.len() != l {
            return Err(Error::DimensionMismatch(format!(
                "constraint rhs has {} entries, expected {}",
                constraint_rhs.len(),
                l
            )));
        }
        if constraint_matrix.iter().any(|a| !a.is_finite()) {
            return Err(Error::Scenario("constraint coefficients must be finite".into()));
        }
        for (row, &v) in constraint_rhs.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NegativeRhs { row, value: v });
            }
        }
        let mut user_constraints = vec![Vec::new(); n_users];
        for l_idx in 0..l {
            for (i, rows) in user_constraints.iter_mut().enumerate() {
                let touches =
                    (0..horizon).any(|t| constraint_matrix[(l_idx, i * horizon + t)] != 0.0);
                if touches {
                    rows.push(l_idx);
                }
            }
        }
        Ok(Self {
            n_users,
            horizon,
            utilities,
            unit_prices: DVector::from_vec(unit_prices),
            peak_price,
            constraint_matrix: if l == 0 {
                DMatrix::zeros(0, nt)
            } else {
                constraint_matrix
            },
            constraint_rhs: DVector::from_vec(constraint_rhs),
            user_constraints,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint_rhs.len()
    }

    pub fn flat(&self, user: usize, slot: usize) -> usize {
        user * self.horizon + slot
    }

    pub fn utility(&self, user: usize, slot: usize) -> &UtilityFunction {
        &self.utilities[self.flat(user, slot)]
    }

    pub fn utilities(&self) -> &[UtilityFunction] {
        &self.utilities
    }

    pub fn unit_price(&self, slot: usize) -> f64 {
        self.unit_prices[slot]
    }

    pub fn unit_prices(&self) -> &DVector<f64> {
        &self.unit_prices
    }

    pub fn peak_price(&self) -> f64 {
        self.peak_price
    }

    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.constraint_matrix
    }

    pub fn constraint_rhs(&self) -> &DVector<f64> {
        &self.constraint_rhs
    }

    /// Rows of `A` with a nonzero coefficient in user `i`'s column block.
    pub fn user_constraints(&self, user: usize) -> &[usize] {
        &self.user_constraints[user]
    }

    /// Coefficient `a^{i,l}_t`.
    pub fn coeff(&self, row: usize, user: usize, slot: usize) -> f64 {
        self.constraint_matrix[(row, self.flat(user, slot))]
    }

    /// `a^{i,l} . v` for a per-slot vector `v` of user `i`.
    pub fn user_row_dot(&self, row: usize, user: usize, per_slot: &DVector<f64>) -> f64 {
        (0..self.horizon).map(|t| self.coeff(row, user, t) * per_slot[t]).sum()
    }

    /// `a^l . x` over the whole demand matrix.
    pub fn row_dot(&self, row: usize, x: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_users {
            for t in 0..self.horizon {
                acc += self.constraint_matrix[(row, self.flat(i, t))] * x[(i, t)];
            }
        }
        acc
    }

    /// Row slacks `b - Ax` (nonnegative iff `x` is feasible).
    pub fn slacks(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_constraints(), |l, _| {
            self.constraint_rhs[l] - self.row_dot(l, x)
        })
    }

    pub fn is_feasible(&self, x: &DMatrix<f64>, tol: f64) -> bool {
        self.slacks(x).iter().all(|s| *s >= -tol)
    }

    /// Total community demand per slot.
    pub fn slot_totals(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.horizon, |t, _| (0..self.n_users).map(|i| x[(i, t)]).sum())
    }
}

/// Validate a declarative scenario and assemble the `Instance`.
pub fn build_instance(scenario: &Scenario) -> Result<Instance> {
    let n_users = scenario.users.len();
    if n_users == 0 {
        return Err(Error::Scenario("scenario has no users".into()));
    }
    let horizon = scenario.prices.unit.len();
    let mut utilities = Vec::with_capacity(n_users * horizon);
    for (i, user) in scenario.users.iter().enumerate() {
        if user.utilities.len() != horizon {
            return Err(Error::DimensionMismatch(format!(
                "user {} has {} utilities, expected horizon {}",
                i + 1,
                user.utilities.len(),
                horizon
            )));
        }
        for u in &user.utilities {
            let [lo, hi] = u.domain;
            utilities.push(match u.family {
                FamilySpec::ScaledLog { weight, shift } => {
                    UtilityFunction::scaled_log(weight, shift, lo, hi)?
                }
                FamilySpec::Quadratic { slope, curvature } => {
                    UtilityFunction::quadratic(slope, curvature, lo, hi)?
                }
            });
        }
    }
    let nt = n_users * horizon;
    let l = scenario.constraints.rows.len();
    if nt > 1 << 20 || l.saturating_mul(nt) > 1 << 26 {
        return Err(Error::DimensionMismatch(
            "scenario dimensions exceed the supported size".into(),
        ));
    }
    let mut a = DMatrix::zeros(l, nt);
    let mut b = Vec::with_capacity(l);
    for (row, spec) in scenario.constraints.rows.iter().enumerate() {
        for &(user, slot, value) in &spec.coeffs {
            if user == 0 || user > n_users || slot == 0 || slot > horizon {
                return Err(Error::Scenario(format!(
                    "constraint row {} references (user {user}, slot {slot}) outside the \
                     {n_users}x{horizon} grid (1-based)",
                    row + 1
                )));
            }
            if !value.is_finite() {
                return Err(Error::Scenario(format!(
                    "constraint row {} has non-finite coefficient",
                    row + 1
                )));
            }
            a[(row, (user - 1) * horizon + (slot - 1))] += value;
        }
        b.push(spec.rhs);
    }
    Instance::new(
        n_users,
        horizon,
        utilities,
        scenario.prices.unit.clone(),
        scenario.prices.peak,
        a,
        b,
    )
}

/// Community energy cost: per-slot unit prices plus the peak charge.
pub fn community_cost(inst: &Instance, x: &DMatrix<f64>) -> f64 {
    let totals = inst.slot_totals(x);
    let linear: f64 = (0..inst.horizon()).map(|t| inst.unit_price(t) * totals[t]).sum();
    let peak = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    linear + inst.peak_price() * peak
}

/// Sum of utilities minus the community cost.
pub fn social_welfare(inst: &Instance, x: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..inst.n_users() {
        for t in 0..inst.horizon() {
            total += inst.utility(i, t).value(x[(i, t)])?;
        }
    }
    Ok(total - community_cost(inst, x))
}

/// Coordinates whose zeroing leaves the polytope; returns `(user, slot, violated_row)`
/// triples for every coordinate where zeroing breaks feasibility.
pub fn coordinate_zeroing_violations(
    inst: &Instance,
    x: &DMatrix<f64>,
    tol: f64,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let slacks = inst.slacks(x);
    for i in 0..inst.n_users() {
        for t in 0..inst.horizon() {
            for l in 0..inst.n_constraints() {
                // zeroing (i,t) changes row l's slack by + a^{i,l}_t * x^i_t
                let new_slack = slacks[l] + inst.coeff(l, i, t) * x[(i, t)];
                if new_slack < -tol {
                    out.push((i, t, l));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub samples_checked: usize,
    /// `(user, slot, row)` of each zeroing that left the polytope.
    pub counterexamples: Vec<(usize, usize, usize)>,
    pub pass: bool,
}

/// Spot-check coordinate convexity: draw feasible points by rejection sampling
/// inside the domain bounding box, zero each coordinate and re-test feasibility.
pub fn check_coordinate_convexity(
    inst: &Instance,
    samples: usize,
    seed: u64,
) -> Result<ConvexityReport> {
    assert!(samples >= 1, "samples must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = samples.saturating_mul(1000);
    let mut accepted = Vec::with_capacity(samples);
    let mut attempts = 0;
    while accepted.len() < samples && attempts < budget {
        attempts += 1;
        let x = DMatrix::from_fn(inst.n_users(), inst.horizon(), |i, t| {
            let u = inst.utility(i, t);
            rng.gen_range(u.domain_lo..=u.domain_hi)
        });
        if inst.is_feasible(&x, 1e-12) {
            accepted.push(x);
        }
    }
    if accepted.is_empty() {
        return Err(Error::SamplingFailed { attempts });
    }
    let mut counterexamples = Vec::new();
    for x in &accepted {
        counterexamples.extend(coordinate_zeroing_violations(inst, x, 1e-9));
    }
    counterexamples.sort_unstable();
    counterexamples.dedup();
    Ok(ConvexityReport {
        samples_checked: accepted.len(),
        pass: counterexamples.is_empty(),
        counterexamples,
    })
}

/// Draw feasible demand matrices by rejection sampling in the domain box.
/// Used by the learning-bound validator and tests.
pub(crate) fn sample_feasible(
    inst: &Instance,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(samples);
    let budget = samples.saturating_mul(1000);
    let mut attempts = 0;
    while out.len() < samples && attempts < budget {
        attempts += 1;
        let x = DMatrix::from_fn(inst.n_users(), inst.horizon(), |i, t| {
            let u = inst.utility(i, t);
            rng.gen_range(u.domain_lo..=u.domain_hi)
        });
        if inst.is_feasible(&x, 1e-12) {
            out.push(x);
        }
    }
    out
}
