//! The baseline centralized mechanism: message profiles, radial pricing,
//! allocation and tax functions, equilibrium construction from the solver
//! optimum, numerical equilibrium verification, and the budget/rationality
//! audits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{community_cost, Instance};
use crate::oracle::{check_kkt, CentralSolution};
use crate::scenario::{ProfileFile, ProfileUser};

/// Tie tolerance for the peak-slot set in the radial pricing fallback branch.
pub const PEAK_TOL: f64 = 1e-9;

/// One user's message: announced demands, suggested constraint prices,
/// suggested peak prices, and the proxy for the next user's demands.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralMessage {
    pub y: DVector<f64>,
    pub q: DVector<f64>,
    pub s: DVector<f64>,
    pub beta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralMessageProfile {
    users: Vec<CentralMessage>,
}

impl CentralMessageProfile {
    pub fn new(users: Vec<CentralMessage>) -> Self {
        Self { users }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn user(&self, i: usize) -> &CentralMessage {
        &self.users[i]
    }

    pub fn user_mut(&mut self, i: usize) -> &mut CentralMessage {
        &mut self.users[i]
    }

    pub fn users(&self) -> &[CentralMessage] {
        &self.users
    }

    /// Message-space and dimension validation against an instance.
    pub fn validate(&self, inst: &Instance) -> Result<()> {
        if self.users.len() != inst.n_users() {
            return Err(Error::DimensionMismatch(format!(
                "profile has {} users, instance has {}",
                self.users.len(),
                inst.n_users()
            )));
        }
        let (t, l) = (inst.horizon(), inst.n_constraints());
        for (i, m) in self.users.iter().enumerate() {
            if m.y.len() != t || m.s.len() != t || m.beta.len() != t || m.q.len() != l {
                return Err(Error::DimensionMismatch(format!(
                    "user {}: message dimensions do not match the instance",
                    i + 1
                )));
            }
            if m.q.iter().chain(m.s.iter()).any(|v| *v < 0.0) {
                return Err(Error::Scenario(format!(
                    "user {}: suggested prices must be nonnegative",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn from_file(file: &ProfileFile, inst: &Instance) -> Result<Self> {
        file.validate(inst)?;
        let users = file
            .users
            .iter()
            .map(|u| CentralMessage {
                y: DVector::from_vec(u.y.clone()),
                q: DVector::from_vec(u.q.clone()),
                s: DVector::from_vec(u.s.clone()),
                beta: DVector::from_vec(u.beta.clone()),
            })
            .collect();
        Ok(Self::new(users))
    }

    pub fn to_file(&self) -> ProfileFile {
        ProfileFile {
            users: self
                .users
                .iter()
                .map(|m| ProfileUser {
                    y: m.y.iter().cloned().collect(),
                    q: m.q.iter().cloned().collect(),
                    s: m.s.iter().cloned().collect(),
                    beta: m.beta.iter().cloned().collect(),
                })
                .collect(),
        }
    }
}

/// Everything in user `i`'s tax that is outside her control.
#[derive(Debug, Clone)]
pub struct MessageAggregates {
    /// Mean of the other users' peak-price suggestions per slot.
    pub s_minus: DVector<f64>,
    /// Mean of the other users' constraint-price suggestions per row.
    pub q_minus: DVector<f64>,
    /// Other users' demand totals with user `i`'s own demand proxied by her
    /// predecessor's announcement.
    pub zeta_minus: DVector<f64>,
    /// `max_t zeta_minus`.
    pub z_minus: f64,
}

/// Aggregate the messages of everyone but user `i`.
pub fn aggregates(inst: &Instance, m: &CentralMessageProfile, i: usize) -> MessageAggregates {
    let n = m.n_users();
    let t = inst.horizon();
    let l = inst.n_constraints();
    let prev = (i + n - 1) % n;
    let mut s_minus = DVector::zeros(t);
    let mut q_minus = DVector::zeros(l);
    let mut zeta_minus = DVector::zeros(t);
    for j in 0..n {
        if j == i {
            continue;
        }
        s_minus += &m.user(j).s;
        q_minus += &m.user(j).q;
        zeta_minus += &m.user(j).y;
    }
    if n > 1 {
        s_minus /= (n - 1) as f64;
        q_minus /= (n - 1) as f64;
    }
    zeta_minus += &m.user(prev).beta;
    let z_minus = zeta_minus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    MessageAggregates { s_minus, q_minus, zeta_minus, z_minus }
}

/// Shape a suggested peak-price vector so it sums to `p0`: proportional to
/// `s_tilde` when nonzero, otherwise split equally over the peak slots of
/// `y_tilde` (ties within `peak_tol`).
pub fn radial_pricing(
    s_tilde: &DVector<f64>,
    y_tilde: &DVector<f64>,
    p0: f64,
    peak_tol: f64,
) -> DVector<f64> {
    let t = s_tilde.len();
    let total: f64 = s_tilde.sum();
    let mut out = if s_tilde.iter().any(|v| *v != 0.0) {
        DVector::from_fn(t, |k, _| p0 * s_tilde[k] / total)
    } else {
        let peak = y_tilde.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> =
            (0..t).filter(|&k| y_tilde[k] >= peak - peak_tol).collect();
        let share = p0 / ties.len() as f64;
        let mut v = DVector::zeros(t);
        for k in ties {
            v[k] = share;
        }
        v
    };
    let sum = out.sum();
    if sum > 0.0 {
        out *= p0 / sum;
    }
    out
}

/// Users get exactly what they announce.
pub fn allocate(m: &CentralMessageProfile) -> DMatrix<f64> {
    let n = m.n_users();
    let t = m.user(0).y.len();
    DMatrix::from_fn(n, t, |i, slot| m.user(i).y[slot])
}

#[derive(Debug, Clone)]
pub struct TaxBreakdown {
    pub cost: f64,
    pub pr_beta: f64,
    /// Consensus-plus-slackness penalty per constraint row.
    pub con_l: DVector<f64>,
    /// Consensus-plus-slackness penalty per peak slot.
    pub con_t: DVector<f64>,
}

impl TaxBreakdown {
    pub fn total(&self) -> f64 {
        self.cost + self.pr_beta + self.con_l.sum() + self.con_t.sum()
    }
}

/// Per-row slackness terms `b^l - sum_{j != i} a^{j,l} y^j - a^{i,l} beta^{i-1}`
/// seen by user `i`.
fn excess_demands(inst: &Instance, m: &CentralMessageProfile, i: usize) -> DVector<f64> {
    let n = m.n_users();
    let prev = (i + n - 1) % n;
    DVector::from_fn(inst.n_constraints(), |l, _| {
        let mut e = inst.constraint_rhs()[l];
        for j in 0..n {
            if j != i {
                e -= inst.user_row_dot(l, j, &m.user(j).y);
            }
        }
        e - inst.user_row_dot(l, i, &m.user(prev).beta)
    })
}

/// User `i`'s tax under the centralized mechanism.
pub fn tax(inst: &Instance, m: &CentralMessageProfile, i: usize) -> TaxBreakdown {
    let n = m.n_users();
    let t = inst.horizon();
    let next = (i + 1) % n;
    let msg = m.user(i);
    let agg = aggregates(inst, m, i);
    let rp = radial_pricing(&agg.s_minus, &agg.zeta_minus, inst.peak_price(), PEAK_TOL);

    let mut cost = 0.0;
    for slot in 0..t {
        cost += (inst.unit_price(slot) + rp[slot]) * msg.y[slot];
    }
    for &l in inst.user_constraints(i) {
        cost += agg.q_minus[l] * inst.user_row_dot(l, i, &msg.y);
    }

    let mut pr_beta = 0.0;
    for slot in 0..t {
        let d = msg.beta[slot] - m.user(next).y[slot];
        pr_beta += d * d;
    }

    let excess = excess_demands(inst, m, i);
    let con_l = DVector::from_fn(inst.n_constraints(), |l, _| {
        let d = msg.q[l] - agg.q_minus[l];
        d * d + msg.q[l] * excess[l]
    });
    let con_t = DVector::from_fn(t, |slot, _| {
        let d = msg.s[slot] - agg.s_minus[slot];
        d * d + msg.s[slot] * (agg.z_minus - agg.zeta_minus[slot])
    });

    TaxBreakdown { cost, pr_beta, con_l, con_t }
}

/// Utility of the allocation minus the tax.
pub fn payoff(inst: &Instance, m: &CentralMessageProfile, i: usize) -> Result<f64> {
    let msg = m.user(i);
    let mut value = 0.0;
    for slot in 0..inst.horizon() {
        value += inst.utility(i, slot).value(msg.y[slot])?;
    }
    Ok(value - tax(inst, m, i).total())
}

/// The equilibrium profile induced by a verified optimum: everyone announces
/// the optimal demands and multipliers, and proxies the next user's demands.
pub fn construct_ne(
    inst: &Instance,
    sol: &CentralSolution,
    kkt_tol: f64,
) -> Result<CentralMessageProfile> {
    let report = check_kkt(inst, sol, kkt_tol);
    if !report.pass {
        return Err(Error::KktFailed { tol: kkt_tol, residual: report.max_residual() });
    }
    let n = inst.n_users();
    let users = (0..n)
        .map(|i| CentralMessage {
            y: sol.x.row(i).transpose(),
            q: sol.lambda.clone(),
            s: sol.mu.clone(),
            beta: sol.x.row((i + 1) % n).transpose(),
        })
        .collect();
    Ok(CentralMessageProfile::new(users))
}

/// Which message coordinate a deviation probe touched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviationKind {
    Demand { slot: usize },
    ConstraintPrice { row: usize },
    PeakPrice { slot: usize },
    Proxy { slot: usize },
    /// Distributed-mechanism proxy quoted for a helped neighbor.
    ProxyFor { user: usize, slot: usize },
    /// Distributed-mechanism constraint summary toward a neighbor.
    SummaryN { neighbor: usize, row: usize },
    /// Distributed-mechanism peak summary toward a neighbor.
    SummaryNu { neighbor: usize, slot: usize },
    Joint { sample: usize },
}

impl std::fmt::Display for DeviationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Demand { slot } => write!(f, "y[{}]", slot + 1),
            Self::ConstraintPrice { row } => write!(f, "q[{}]", row + 1),
            Self::PeakPrice { slot } => write!(f, "s[{}]", slot + 1),
            Self::Proxy { slot } => write!(f, "beta[{}]", slot + 1),
            Self::ProxyFor { user, slot } => write!(f, "beta[{},{}]", user + 1, slot + 1),
            Self::SummaryN { neighbor, row } => write!(f, "n[{},{}]", neighbor + 1, row + 1),
            Self::SummaryNu { neighbor, slot } => write!(f, "nu[{},{}]", neighbor + 1, slot + 1),
            Self::Joint { sample } => write!(f, "joint#{sample}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UserDeviation {
    pub user: usize,
    pub improvement: f64,
    pub kind: DeviationKind,
    /// Best coordinate value found, for single-coordinate probes.
    pub proposed: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NeReport {
    pub per_user: Vec<UserDeviation>,
    pub max_improvement: f64,
    pub tol: f64,
    pub pass: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct NeVerifyConfig {
    /// Random joint perturbations per user, on top of the per-coordinate sweeps.
    pub deviation_samples: usize,
    /// Interval width at which the demand line search stops.
    pub line_search_tol: f64,
    /// Largest payoff improvement still counted as "no profitable deviation".
    pub tol: f64,
    pub seed: u64,
}

impl Default for NeVerifyConfig {
    fn default() -> Self {
        Self { deviation_samples: 1000, line_search_tol: 1e-7, tol: 1e-7, seed: 0 }
    }
}

/// Golden-section maximization of a concave 1-D function on `[a, b]`.
pub(crate) fn golden_max(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (a, b);
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    if fm >= fc && fm >= fd {
        (mid, fm)
    } else if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn best_deviation_for_user(
    inst: &Instance,
    m: &CentralMessageProfile,
    i: usize,
    cfg: &NeVerifyConfig,
) -> Result<UserDeviation> {
    let base = payoff(inst, m, i)?;
    let mut scratch = m.clone();
    let mut best = UserDeviation {
        user: i,
        improvement: f64::NEG_INFINITY,
        kind: DeviationKind::Demand { slot: 0 },
        proposed: None,
    };
    let consider = |imp: f64, kind: DeviationKind, proposed: Option<f64>, best: &mut UserDeviation| {
        if imp > best.improvement {
            *best = UserDeviation { user: i, improvement: imp, kind, proposed };
        }
    };

    let agg = aggregates(inst, m, i);
    let excess = excess_demands(inst, m, i);

    // demands: concave line search on the utility domain
    for slot in 0..inst.horizon() {
        let u = *inst.utility(i, slot);
        let original = scratch.user(i).y[slot];
        let mut eval = |v: f64| {
            scratch.user_mut(i).y[slot] = v;
            payoff(inst, &scratch, i).expect("demand probe stays inside the utility domain")
        };
        let (y_best, f_best) =
            golden_max(&mut eval, u.domain_lo, u.domain_hi, cfg.line_search_tol);
        scratch.user_mut(i).y[slot] = original;
        consider(f_best - base, DeviationKind::Demand { slot }, Some(y_best), &mut best);
    }
    // constraint prices: quadratic vertex clipped at zero
    for row in 0..inst.n_constraints() {
        let vertex = (agg.q_minus[row] - excess[row] / 2.0).max(0.0);
        let original = scratch.user(i).q[row];
        scratch.user_mut(i).q[row] = vertex;
        let probe = payoff(inst, &scratch, i)?;
        scratch.user_mut(i).q[row] = original;
        consider(probe - base, DeviationKind::ConstraintPrice { row }, Some(vertex), &mut best);
    }
    // peak prices: same shape with the peak gap as slackness
    for slot in 0..inst.horizon() {
        let gap = agg.z_minus - agg.zeta_minus[slot];
        let vertex = (agg.s_minus[slot] - gap / 2.0).max(0.0);
        let original = scratch.user(i).s[slot];
        scratch.user_mut(i).s[slot] = vertex;
        let probe = payoff(inst, &scratch, i)?;
        scratch.user_mut(i).s[slot] = original;
        consider(probe - base, DeviationKind::PeakPrice { slot }, Some(vertex), &mut best);
    }
    // proxies: exact quadratic vertex at the next user's announcement
    let next = (i + 1) % m.n_users();
    for slot in 0..inst.horizon() {
        let vertex = m.user(next).y[slot];
        let original = scratch.user(i).beta[slot];
        scratch.user_mut(i).beta[slot] = vertex;
        let probe = payoff(inst, &scratch, i)?;
        scratch.user_mut(i).beta[slot] = original;
        consider(probe - base, DeviationKind::Proxy { slot }, Some(vertex), &mut best);
    }
    // random joint perturbations
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    for sample in 0..cfg.deviation_samples {
        {
            let msg = scratch.user_mut(i);
            for slot in 0..inst.horizon() {
                let u = inst.utility(i, slot);
                msg.y[slot] = rng.gen_range(u.domain_lo..=u.domain_hi);
                msg.s[slot] =
                    (m.user(i).s[slot] + rng.gen_range(-1.0..1.0) * (1.0 + m.user(i).s[slot])).max(0.0);
                msg.beta[slot] =
                    m.user(i).beta[slot] + rng.gen_range(-1.0..1.0) * (1.0 + m.user(i).beta[slot].abs());
            }
            for row in 0..inst.n_constraints() {
                msg.q[row] =
                    (m.user(i).q[row] + rng.gen_range(-1.0..1.0) * (1.0 + m.user(i).q[row])).max(0.0);
            }
        }
        let probe = payoff(inst, &scratch, i)?;
        consider(probe - base, DeviationKind::Joint { sample }, None, &mut best);
        scratch.users[i] = m.user(i).clone();
    }
    Ok(best)
}

/// Numerical equilibrium certificate: per-coordinate best responses plus
/// seeded random joint deviations, per user. Passes when no probe improves
/// any payoff by more than `cfg.tol`.
pub fn verify_ne(
    inst: &Instance,
    m: &CentralMessageProfile,
    cfg: &NeVerifyConfig,
) -> Result<NeReport> {
    m.validate(inst)?;
    let per_user: Result<Vec<UserDeviation>> = (0..m.n_users())
        .into_par_iter()
        .map(|i| best_deviation_for_user(inst, m, i, cfg))
        .collect();
    let per_user = per_user?;
    let max_improvement =
        per_user.iter().map(|d| d.improvement).fold(f64::NEG_INFINITY, f64::max);
    Ok(NeReport {
        max_improvement,
        tol: cfg.tol,
        pass: max_improvement <= cfg.tol,
        seed: cfg.seed,
        per_user,
    })
}

/// Tax with the planner's income redistributed: each user gets back an equal
/// share of the others' suggested constraint revenue.
pub fn rebate_tax(inst: &Instance, m: &CentralMessageProfile, i: usize) -> f64 {
    let agg = aggregates(inst, m, i);
    let refund: f64 = (0..inst.n_constraints())
        .map(|l| agg.q_minus[l] * inst.constraint_rhs()[l])
        .sum();
    tax(inst, m, i).total() - refund / m.n_users() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct BudgetReport {
    /// Planner surplus under the plain taxes.
    pub gross: f64,
    /// Planner surplus after the rebate; zero at equilibrium.
    pub rebated: f64,
}

pub fn budget_report(inst: &Instance, m: &CentralMessageProfile) -> BudgetReport {
    let x = allocate(m);
    let cost = community_cost(inst, &x);
    let gross: f64 = (0..m.n_users()).map(|i| tax(inst, m, i).total()).sum::<f64>() - cost;
    let rebated: f64 =
        (0..m.n_users()).map(|i| rebate_tax(inst, m, i)).sum::<f64>() - cost;
    BudgetReport { gross, rebated }
}

#[derive(Debug, Clone)]
pub struct IrEntry {
    pub user: usize,
    pub payoff: f64,
    /// Utility of not participating: zero allocation, zero tax.
    pub outside_option: f64,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct IrReport {
    pub per_user: Vec<IrEntry>,
    pub pass: bool,
}

/// Individual rationality audit: equilibrium payoff against the outside option.
pub fn check_ir(inst: &Instance, m: &CentralMessageProfile, tol: f64) -> Result<IrReport> {
    let mut per_user = Vec::with_capacity(m.n_users());
    for i in 0..m.n_users() {
        let value = payoff(inst, m, i)?;
        let mut outside = 0.0;
        for slot in 0..inst.horizon() {
            outside += inst.utility(i, slot).value(0.0)?;
        }
        per_user.push(IrEntry {
            user: i,
            payoff: value,
            outside_option: outside,
            ok: value >= outside - tol,
        });
    }
    let pass = per_user.iter().all(|e| e.ok);
    Ok(IrReport { per_user, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn fixture_ne() -> (Instance, CentralMessageProfile) {
        let inst = fixtures::example_instance();
        let sol = fixtures::reference_solution();
        let m = construct_ne(&inst, &sol, 1e-3).unwrap();
        (inst, m)
    }

    #[test]
    fn radial_pricing_reference_cases() {
        let p0 = 0.05;
        let rp = radial_pricing(
            &DVector::zeros(2),
            &DVector::from_vec(vec![-0.8525, 2.8525]),
            p0,
            PEAK_TOL,
        );
        assert_eq!(rp[0], 0.0);
        assert!((rp[1] - 0.05).abs() < 1e-15);

        let rp = radial_pricing(
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_vec(vec![9.0, -3.0]),
            p0,
            PEAK_TOL,
        );
        assert!((rp[0] - 0.025).abs() < 1e-15 && (rp[1] - 0.025).abs() < 1e-15);

        let rp = radial_pricing(
            &DVector::zeros(2),
            &DVector::from_vec(vec![3.0, 3.0]),
            p0,
            PEAK_TOL,
        );
        assert!((rp[0] - 0.025).abs() < 1e-15 && (rp[1] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn allocation_is_the_announcement() {
        let (inst, mut m) = fixture_ne();
        assert_eq!(allocate(&m), fixtures::reference_demands());
        // independent of q, s, beta
        m.user_mut(1).q[3] = 9.0;
        m.user_mut(2).s[0] = 4.0;
        m.user_mut(0).beta[1] = -7.0;
        assert_eq!(allocate(&m), fixtures::reference_demands());
        let _ = inst;
    }

    #[test]
    fn tax_at_reference_ne_matches_direct_expansion() {
        let (inst, m) = fixture_ne();
        let x = fixtures::reference_demands();
        let lambda = fixtures::reference_lambda();
        let mu = fixtures::reference_mu();
        // user 1 pays unit+peak prices on her demands plus the two binding rows
        let expected = (0.1 + mu[0]) * x[(0, 0)]
            + (0.2 + mu[1]) * x[(0, 1)]
            + lambda[0] * -x[(0, 0)]
            + lambda[6] * (x[(0, 0)] + x[(0, 1)]);
        let breakdown = tax(&inst, &m, 0);
        assert!((breakdown.total() - expected).abs() < 1e-9);
        assert!(breakdown.pr_beta.abs() < 1e-15);
        assert!(breakdown.con_l.iter().all(|v| v.abs() < 1e-12));
        assert!(breakdown.con_t.iter().all(|v| v.abs() < 1e-12));
    }

    /// Literal expansion of the first user's tax on the bundled community,
    /// written out term by term as an independent oracle for `tax`.
    fn user1_tax_expansion(inst: &Instance, m: &CentralMessageProfile) -> f64 {
        let (m1, m2, m3) = (m.user(0), m.user(1), m.user(2));
        let q_minus: Vec<f64> = (0..7).map(|l| (m2.q[l] + m3.q[l]) / 2.0).collect();
        let s_minus = DVector::from_vec(vec![
            (m2.s[0] + m3.s[0]) / 2.0,
            (m2.s[1] + m3.s[1]) / 2.0,
        ]);
        // user 1's own demand is proxied by user 3's announcement
        let zeta = DVector::from_vec(vec![
            m3.beta[0] + m2.y[0] + m3.y[0],
            m3.beta[1] + m2.y[1] + m3.y[1],
        ]);
        let z = zeta[0].max(zeta[1]);
        let rp = radial_pricing(&s_minus, &zeta, inst.peak_price(), PEAK_TOL);
        let mut total = (0.1 + rp[0]) * m1.y[0] + (0.2 + rp[1]) * m1.y[1];
        total += -q_minus[0] * m1.y[0] - q_minus[1] * m1.y[1] + q_minus[6] * (m1.y[0] + m1.y[1]);
        total += (m1.beta[0] - m2.y[0]).powi(2) + (m1.beta[1] - m2.y[1]).powi(2);
        // lower-bound rows: user 1's own (via the proxy), then users 2 and 3
        total += (m1.q[0] - q_minus[0]).powi(2) + m1.q[0] * (1.0 + m3.beta[0]);
        total += (m1.q[1] - q_minus[1]).powi(2) + m1.q[1] * (1.0 + m3.beta[1]);
        total += (m1.q[2] - q_minus[2]).powi(2) + m1.q[2] * (1.0 + m2.y[0]);
        total += (m1.q[3] - q_minus[3]).powi(2) + m1.q[3] * (1.0 + m2.y[1]);
        total += (m1.q[4] - q_minus[4]).powi(2) + m1.q[4] * (1.0 + m3.y[0]);
        total += (m1.q[5] - q_minus[5]).powi(2) + m1.q[5] * (1.0 + m3.y[1]);
        total += (m1.q[6] - q_minus[6]).powi(2)
            + m1.q[6]
                * (2.0 - m2.y[0] - m2.y[1] - m3.y[0] - m3.y[1] - m3.beta[0] - m3.beta[1]);
        for t in 0..2 {
            total += (m1.s[t] - s_minus[t]).powi(2) + m1.s[t] * (z - zeta[t]);
        }
        total
    }

    #[test]
    fn user1_tax_matches_the_literal_expansion() {
        let (inst, ne) = fixture_ne();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..25 {
            let mut m = ne.clone();
            if trial > 0 {
                for i in 0..3 {
                    let user = m.user_mut(i);
                    user.y.apply(|v| *v += rng.gen_range(-0.4..0.4));
                    user.q.apply(|v| *v = (*v + rng.gen_range(-0.3..0.3)).max(0.0));
                    user.s.apply(|v| *v = (*v + rng.gen_range(-0.03..0.03)).max(0.0));
                    user.beta.apply(|v| *v += rng.gen_range(-0.4..0.4));
                }
            }
            let direct = user1_tax_expansion(&inst, &m);
            let computed = tax(&inst, &m, 0).total();
            assert!(
                (computed - direct).abs() < 1e-10,
                "trial {trial}: {computed} vs {direct}"
            );
        }
    }

    #[test]
    fn proxy_penalty_is_isolated_and_quadratic() {
        let (inst, m) = fixture_ne();
        let base = tax(&inst, &m, 1).total();
        let mut probe = m.clone();
        probe.user_mut(1).beta[0] += 0.25;
        assert!((tax(&inst, &probe, 1).total() - base - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn peak_price_deviation_cost_matches_slack_algebra() {
        let (inst, m) = fixture_ne();
        let agg = aggregates(&inst, &m, 0);
        let gap = agg.z_minus - agg.zeta_minus[0];
        assert!(gap > 1e-6, "slot 1 is slack at the reference optimum");
        let eps = 1e-3;
        let base = tax(&inst, &m, 0).total();
        let mut probe = m.clone();
        probe.user_mut(0).s[0] += eps;
        let delta = tax(&inst, &probe, 0).total() - base;
        assert!((delta - (eps * eps + eps * gap)).abs() < 1e-12);
        assert!(delta > 0.0);
    }

    #[test]
    fn payoff_plus_tax_is_utility() {
        let (inst, m) = fixture_ne();
        for i in 0..3 {
            let u = payoff(&inst, &m, i).unwrap() + tax(&inst, &m, i).total();
            let direct: f64 =
                (0..2).map(|t| inst.utility(i, t).value(m.user(i).y[t]).unwrap()).sum();
            assert!((u - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_profile_pays_outside_option() {
        let inst = fixtures::example_instance();
        let zero = CentralMessage {
            y: DVector::zeros(2),
            q: DVector::zeros(7),
            s: DVector::zeros(2),
            beta: DVector::zeros(2),
        };
        let m = CentralMessageProfile::new(vec![zero.clone(), zero.clone(), zero]);
        for i in 0..3 {
            let outside: f64 =
                (0..2).map(|t| inst.utility(i, t).value(0.0).unwrap()).sum();
            assert!((payoff(&inst, &m, i).unwrap() - outside).abs() < 1e-12);
        }
    }

    #[test]
    fn construct_ne_rejects_bad_solutions() {
        let inst = fixtures::example_instance();
        let mut sol = fixtures::reference_solution();
        sol.lambda[6] = 0.0;
        assert!(matches!(
            construct_ne(&inst, &sol, 1e-3),
            Err(Error::KktFailed { .. })
        ));
    }

    #[test]
    fn construct_ne_announces_the_multipliers() {
        let (_, m) = fixture_ne();
        let lambda = fixtures::reference_lambda();
        let mu = fixtures::reference_mu();
        for i in 0..3 {
            assert_eq!(m.user(i).q[6], lambda[6]);
            assert_eq!(m.user(i).q[0], lambda[0]);
            assert_eq!(m.user(i).s[0], mu[0]);
            assert_eq!(m.user(i).s[1], mu[1]);
        }
    }

    #[test]
    fn ir_can_fail_away_from_equilibrium() {
        let (inst, m) = fixture_ne();
        let mut adversarial = m.clone();
        adversarial.user_mut(0).beta[0] += 100.0;
        let report = check_ir(&inst, &adversarial, 1e-9).unwrap();
        assert!(!report.per_user[0].ok, "a huge proxy penalty sinks the payoff");
    }

    #[test]
    fn construct_ne_wraps_proxy_for_single_user() {
        let u = crate::model::UtilityFunction::quadratic(0.5, 1.0, -1.0, 1.0).unwrap();
        let inst = Instance::new(
            1,
            1,
            vec![u],
            vec![0.2],
            0.1,
            DMatrix::zeros(0, 1),
            vec![],
        )
        .unwrap();
        let sol = crate::oracle::solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne(&inst, &sol, 1e-6).unwrap();
        assert_eq!(m.user(0).beta, m.user(0).y);
    }

    #[test]
    fn verify_detects_shifted_demand() {
        let inst = fixtures::example_instance();
        let sol = crate::oracle::solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne(&inst, &sol, 1e-6).unwrap();
        let mut tampered = m.clone();
        tampered.user_mut(1).y[1] += 0.1;
        let cfg = NeVerifyConfig { deviation_samples: 200, ..Default::default() };
        let report = verify_ne(&inst, &tampered, &cfg).unwrap();
        assert!(!report.pass);
        let dev = &report.per_user[1];
        assert!(dev.improvement > 1e-7);
        assert_eq!(dev.kind, DeviationKind::Demand { slot: 1 });
        let proposed = dev.proposed.unwrap();
        assert!((proposed - 0.9508).abs() < 1e-3, "best response was {proposed}");
    }

    #[test]
    fn verify_detects_halved_sum_row_prices() {
        let inst = fixtures::example_instance();
        let sol = crate::oracle::solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne(&inst, &sol, 1e-6).unwrap();
        let mut tampered = m.clone();
        for i in 0..3 {
            tampered.user_mut(i).q[6] *= 0.5;
        }
        let cfg = NeVerifyConfig { deviation_samples: 200, ..Default::default() };
        let report = verify_ne(&inst, &tampered, &cfg).unwrap();
        assert!(!report.pass);
        // cheaper aggregated prices pull every user's demand announcement up
        for dev in &report.per_user {
            assert!(dev.improvement > 1e-7);
        }
    }

    #[test]
    fn rebate_matches_equal_share_at_ne() {
        let (inst, m) = fixture_ne();
        let lambda = fixtures::reference_lambda();
        let refund: f64 = lambda[0] + 2.0 * lambda[6];
        for i in 0..3 {
            let expected = tax(&inst, &m, i).total() - refund / 3.0;
            assert!((rebate_tax(&inst, &m, i) - expected).abs() < 1e-12);
        }
        // sum identity over users
        let total_rebated: f64 = (0..3).map(|i| rebate_tax(&inst, &m, i)).sum();
        let total_tax: f64 = (0..3).map(|i| tax(&inst, &m, i).total()).sum();
        assert!((total_rebated - (total_tax - refund)).abs() < 1e-12);
    }

    #[test]
    fn rebate_ignores_own_prices() {
        let (inst, m) = fixture_ne();
        let mut probe = m.clone();
        probe.user_mut(0).q[6] += 0.3;
        let own_tax_shift = tax(&inst, &probe, 0).total() - tax(&inst, &m, 0).total();
        let rebate_shift = rebate_tax(&inst, &probe, 0) - rebate_tax(&inst, &m, 0);
        assert!((rebate_shift - own_tax_shift).abs() < 1e-12);
    }

    #[test]
    fn budget_reference_values() {
        let (inst, m) = fixture_ne();
        let report = budget_report(&inst, &m);
        assert!((report.gross - 2.4168).abs() < 1e-6);
        assert!(report.rebated.abs() < 1e-9);
    }

    #[test]
    fn zero_price_profile_balances_when_nothing_binds() {
        let inst = fixtures::example_instance();
        let x = fixtures::reference_demands();
        let users: Vec<CentralMessage> = (0..3)
            .map(|i| CentralMessage {
                y: x.row(i).transpose(),
                q: DVector::zeros(7),
                s: DVector::zeros(2),
                beta: x.row((i + 1) % 3).transpose(),
            })
            .collect();
        let m = CentralMessageProfile::new(users);
        let report = budget_report(&inst, &m);
        assert!(report.gross.abs() < 1e-12);
    }

    #[test]
    fn ir_holds_at_reference_ne() {
        let (inst, m) = fixture_ne();
        let report = check_ir(&inst, &m, 1e-9).unwrap();
        assert!(report.pass);
        for entry in &report.per_user {
            assert!(entry.payoff >= entry.outside_option - 1e-9);
        }
    }
}
