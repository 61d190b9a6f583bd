//! Distributed mechanism over a tree message-exchange network: helper
//! assignment, nearest-via routing, summary messages standing in for
//! non-neighbor demands, neighborhood-only tax evaluation, and the
//! distributed equilibrium construction/verification.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mech_central::{
    golden_max, radial_pricing, BudgetReport, DeviationKind, IrEntry, IrReport, NeReport,
    NeVerifyConfig, UserDeviation, PEAK_TOL,
};
use crate::model::{community_cost, Instance};
use crate::oracle::{check_kkt, CentralSolution};

/// Tree message-exchange network with a helper assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNetwork {
    n_users: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    phi: Vec<usize>,
    /// `first_hop[i][k]`: the neighbor of `i` on the unique path to `k`
    /// (`i` itself when `k == i`).
    first_hop: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub enum HelperPolicy {
    /// Every user is helped by her lowest-index neighbor.
    LowestIndex,
    /// Explicit helper per user; each entry must be a direct neighbor.
    Explicit(Vec<usize>),
}

impl TreeNetwork {
    /// Build a network from tree edges, defaulting helpers to `LowestIndex`.
    pub fn new(n_users: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_users < 2 {
            return Err(Error::Scenario(
                "the distributed mechanism needs at least two users".into(),
            ));
        }
        let mut adjacency = vec![Vec::new(); n_users];
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n_users || b >= n_users {
                return Err(Error::DimensionMismatch(format!(
                    "edge ({a}, {b}) references a user outside 0..{n_users}"
                )));
            }
            if a == b {
                return Err(Error::Scenario(format!("self-loop on user {a}")));
            }
            let pair = (a.min(b), a.max(b));
            if !normalized.contains(&pair) {
                normalized.push(pair);
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        normalized.sort_unstable();
        for list in &mut adjacency {
            list.sort_unstable();
        }
        if normalized.len() != n_users - 1 {
            return Err(Error::Disconnected);
        }
        let first_hop = compute_first_hops(n_users, &adjacency)?;
        let mut net = Self {
            n_users,
            edges: normalized,
            adjacency,
            phi: Vec::new(),
            first_hop,
        };
        net.phi = assign_helpers(&net, &HelperPolicy::LowestIndex)?;
        Ok(net)
    }

    pub fn with_helpers(mut self, policy: &HelperPolicy) -> Result<Self> {
        self.phi = assign_helpers(&self, policy)?;
        Ok(self)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn phi(&self, i: usize) -> usize {
        self.phi[i]
    }

    /// Users whose proxy is quoted by `i`.
    pub fn helped_by(&self, i: usize) -> Vec<usize> {
        (0..self.n_users).filter(|&j| self.phi[j] == i).collect()
    }
}

fn compute_first_hops(n_users: usize, adjacency: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let mut hops = vec![vec![usize::MAX; n_users]; n_users];
    for start in 0..n_users {
        hops[start][start] = start;
        // BFS remembering through which neighbor of `start` each node was reached
        let mut queue = std::collections::VecDeque::new();
        for &j in &adjacency[start] {
            hops[start][j] = j;
            queue.push_back(j);
        }
        let mut seen = vec![false; n_users];
        seen[start] = true;
        for &j in &adjacency[start] {
            seen[j] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    hops[start][v] = hops[start][u];
                    queue.push_back(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Disconnected);
        }
    }
    Ok(hops)
}

/// Breadth-first spanning tree of a connected graph, rooted at user 0 with
/// sorted adjacency (deterministic for a given edge set).
pub fn spanning_tree(n_users: usize, edges: &[(usize, usize)]) -> Result<TreeNetwork> {
    if n_users < 2 {
        return Err(Error::Scenario(
            "the distributed mechanism needs at least two users".into(),
        ));
    }
    let mut adjacency = vec![Vec::new(); n_users];
    for &(a, b) in edges {
        if a >= n_users || b >= n_users {
            return Err(Error::DimensionMismatch(format!(
                "edge ({a}, {b}) references a user outside 0..{n_users}"
            )));
        }
        if a != b {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    let mut tree_edges = Vec::with_capacity(n_users - 1);
    let mut seen = vec![false; n_users];
    seen[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                tree_edges.push((u, v));
                queue.push_back(v);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Disconnected);
    }
    TreeNetwork::new(n_users, &tree_edges)
}

/// First hop on the tree path from `i` toward `k`.
pub fn nearest_via(net: &TreeNetwork, i: usize, k: usize) -> usize {
    net.first_hop[i][k]
}

/// Compute a helper map under the given policy.
pub fn assign_helpers(net: &TreeNetwork, policy: &HelperPolicy) -> Result<Vec<usize>> {
    match policy {
        HelperPolicy::LowestIndex => Ok((0..net.n_users)
            .map(|i| net.adjacency[i][0])
            .collect()),
        HelperPolicy::Explicit(map) => {
            if map.len() != net.n_users {
                return Err(Error::DimensionMismatch(format!(
                    "helper map has {} entries, expected {}",
                    map.len(),
                    net.n_users
                )));
            }
            for (user, &helper) in map.iter().enumerate() {
                if !net.adjacency[user].contains(&helper) {
                    return Err(Error::InvalidHelper { user, helper });
                }
            }
            Ok(map.clone())
        }
    }
}

/// One user's message in the distributed game.
#[derive(Debug, Clone, PartialEq)]
pub struct DistUserMessage {
    pub y: DVector<f64>,
    pub q: DVector<f64>,
    pub s: DVector<f64>,
    /// Proxy demands quoted for each helped neighbor `j` (those with `phi(j) = i`).
    pub beta: BTreeMap<usize, DVector<f64>>,
    /// Per-neighbor constraint summaries, length-L vectors.
    pub n_summary: BTreeMap<usize, DVector<f64>>,
    /// Per-neighbor peak summaries, length-T vectors.
    pub nu_summary: BTreeMap<usize, DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistMessageProfile {
    users: Vec<DistUserMessage>,
}

impl DistMessageProfile {
    pub fn new(users: Vec<DistUserMessage>) -> Self {
        Self { users }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn user(&self, i: usize) -> &DistUserMessage {
        &self.users[i]
    }

    pub fn user_mut(&mut self, i: usize) -> &mut DistUserMessage {
        &mut self.users[i]
    }

    /// Key sets must match the topology exactly; dimensions must match the instance.
    pub fn validate(&self, inst: &Instance, net: &TreeNetwork) -> Result<()> {
        if self.users.len() != net.n_users() || inst.n_users() != net.n_users() {
            return Err(Error::DimensionMismatch(
                "profile, instance and network disagree on the user count".into(),
            ));
        }
        let (t, l) = (inst.horizon(), inst.n_constraints());
        for (i, m) in self.users.iter().enumerate() {
            if m.y.len() != t || m.s.len() != t || m.q.len() != l {
                return Err(Error::DimensionMismatch(format!(
                    "user {}: y/s/q dimensions do not match the instance",
                    i + 1
                )));
            }
            if m.q.iter().chain(m.s.iter()).any(|v| *v < 0.0) {
                return Err(Error::Scenario(format!(
                    "user {}: suggested prices must be nonnegative",
                    i + 1
                )));
            }
            let helped = net.helped_by(i);
            for j in &helped {
                match m.beta.get(j) {
                    Some(v) if v.len() == t => {}
                    Some(_) => {
                        return Err(Error::DimensionMismatch(format!(
                            "user {}: proxy for {} has the wrong length",
                            i + 1,
                            j + 1
                        )))
                    }
                    None => {
                        return Err(Error::MissingSummary(format!(
                            "user {} must quote a proxy for user {}",
                            i + 1,
                            j + 1
                        )))
                    }
                }
            }
            if m.beta.keys().any(|j| !helped.contains(j)) {
                return Err(Error::Scenario(format!(
                    "user {}: proxy quoted for a user she does not help",
                    i + 1
                )));
            }
            for &j in net.neighbors(i) {
                match (m.n_summary.get(&j), m.nu_summary.get(&j)) {
                    (Some(nv), Some(nuv)) if nv.len() == l && nuv.len() == t => {}
                    (Some(_), Some(_)) => {
                        return Err(Error::DimensionMismatch(format!(
                            "user {}: summary toward {} has the wrong length",
                            i + 1,
                            j + 1
                        )))
                    }
                    _ => {
                        return Err(Error::MissingSummary(format!(
                            "user {} is missing a summary toward neighbor {}",
                            i + 1,
                            j + 1
                        )))
                    }
                }
            }
            if m.n_summary.keys().chain(m.nu_summary.keys()).any(|j| !net.neighbors(i).contains(j))
            {
                return Err(Error::Scenario(format!(
                    "user {}: summary announced for a non-neighbor",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// The slice of a profile that user `i`'s tax is allowed to read: her own
/// message and her direct neighbors'.
struct Neighborhood<'a> {
    focal: usize,
    own: &'a DistUserMessage,
    by_user: BTreeMap<usize, &'a DistUserMessage>,
}

impl<'a> Neighborhood<'a> {
    fn slice(net: &TreeNetwork, m: &'a DistMessageProfile, i: usize) -> Self {
        let mut by_user = BTreeMap::new();
        for &j in net.neighbors(i) {
            by_user.insert(j, m.user(j));
        }
        Self { focal: i, own: m.user(i), by_user }
    }

    fn neighbor(&self, j: usize) -> Result<&'a DistUserMessage> {
        self.by_user.get(&j).copied().ok_or_else(|| {
            Error::MissingSummary(format!(
                "user {} is not visible from user {}",
                j + 1,
                self.focal + 1
            ))
        })
    }
}

/// Reconstructed per-neighbor aggregates `f^{i,j,l}` / `f^{i,j}_t` and the
/// quantities user `i`'s tax derives from them.
struct DistAggregates {
    /// Per neighbor `j`: constraint-row aggregates, length L.
    f_rows: BTreeMap<usize, DVector<f64>>,
    /// Per neighbor `j`: per-slot demand aggregates, length T.
    f_slots: BTreeMap<usize, DVector<f64>>,
    q_minus: DVector<f64>,
    s_minus: DVector<f64>,
    /// Incoming proxy for the focal user, quoted by her helper.
    beta_in: DVector<f64>,
    zeta_minus: DVector<f64>,
    z_minus: f64,
}

fn dist_aggregates(
    inst: &Instance,
    net: &TreeNetwork,
    view: &Neighborhood<'_>,
) -> Result<DistAggregates> {
    let i = view.focal;
    let (t, l) = (inst.horizon(), inst.n_constraints());
    let mut f_rows = BTreeMap::new();
    let mut f_slots = BTreeMap::new();
    let mut q_minus = DVector::zeros(l);
    let mut s_minus = DVector::zeros(t);
    for &j in net.neighbors(i) {
        let msg = view.neighbor(j)?;
        let mut rows = DVector::from_fn(l, |row, _| inst.user_row_dot(row, j, &msg.y));
        let mut slots = msg.y.clone();
        for &h in net.neighbors(j) {
            if h == i {
                continue;
            }
            let n_v = msg.n_summary.get(&h).ok_or_else(|| {
                Error::MissingSummary(format!("summary n[{},{}] absent", j + 1, h + 1))
            })?;
            let nu_v = msg.nu_summary.get(&h).ok_or_else(|| {
                Error::MissingSummary(format!("summary nu[{},{}] absent", j + 1, h + 1))
            })?;
            rows += n_v;
            slots += nu_v;
        }
        f_rows.insert(j, rows);
        f_slots.insert(j, slots);
        q_minus += &msg.q;
        s_minus += &msg.s;
    }
    let degree = net.neighbors(i).len() as f64;
    q_minus /= degree;
    s_minus /= degree;
    let helper = net.phi(i);
    let beta_in = view
        .neighbor(helper)?
        .beta
        .get(&i)
        .ok_or_else(|| {
            Error::MissingSummary(format!(
                "helper {} quotes no proxy for user {}",
                helper + 1,
                i + 1
            ))
        })?
        .clone();
    let mut zeta_minus = beta_in.clone();
    for rows in f_slots.values() {
        zeta_minus += rows;
    }
    let z_minus = zeta_minus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(DistAggregates { f_rows, f_slots, q_minus, s_minus, beta_in, zeta_minus, z_minus })
}

#[derive(Debug, Clone)]
pub struct DistTaxBreakdown {
    pub cost: f64,
    pub pr_n: f64,
    pub pr_beta: f64,
    pub pr_nu: f64,
    pub con_l: DVector<f64>,
    pub con_t: DVector<f64>,
}

impl DistTaxBreakdown {
    pub fn total(&self) -> f64 {
        self.cost + self.pr_n + self.pr_beta + self.pr_nu + self.con_l.sum() + self.con_t.sum()
    }
}

/// User `i`'s tax in the distributed mechanism; reads only her own and her
/// neighbors' messages.
pub fn tax_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    i: usize,
) -> Result<DistTaxBreakdown> {
    let view = Neighborhood::slice(net, m, i);
    let agg = dist_aggregates(inst, net, &view)?;
    let msg = view.own;
    let t = inst.horizon();
    let l = inst.n_constraints();

    let rp = radial_pricing(&agg.s_minus, &agg.zeta_minus, inst.peak_price(), PEAK_TOL);
    let mut cost = 0.0;
    for slot in 0..t {
        cost += (inst.unit_price(slot) + rp[slot]) * msg.y[slot];
    }
    for &row in inst.user_constraints(i) {
        cost += agg.q_minus[row] * inst.user_row_dot(row, i, &msg.y);
    }

    let con_l = DVector::from_fn(l, |row, _| {
        let mut slack = inst.constraint_rhs()[row];
        for rows in agg.f_rows.values() {
            slack -= rows[row];
        }
        slack -= inst.user_row_dot(row, i, &agg.beta_in);
        let d = msg.q[row] - agg.q_minus[row];
        d * d + msg.q[row] * slack
    });
    let con_t = DVector::from_fn(t, |slot, _| {
        let d = msg.s[slot] - agg.s_minus[slot];
        d * d + msg.s[slot] * (agg.z_minus - agg.zeta_minus[slot])
    });

    let mut pr_n = 0.0;
    let mut pr_nu = 0.0;
    for (&j, rows) in &agg.f_rows {
        let own = msg.n_summary.get(&j).ok_or_else(|| {
            Error::MissingSummary(format!("n[{},{}] absent", i + 1, j + 1))
        })?;
        pr_n += (own - rows).norm_squared();
    }
    for (&j, slots) in &agg.f_slots {
        let own = msg.nu_summary.get(&j).ok_or_else(|| {
            Error::MissingSummary(format!("nu[{},{}] absent", i + 1, j + 1))
        })?;
        pr_nu += (own - slots).norm_squared();
    }
    let mut pr_beta = 0.0;
    for (&j, proxy) in &msg.beta {
        let target = &view.neighbor(j)?.y;
        pr_beta += (proxy - target).norm_squared();
    }

    Ok(DistTaxBreakdown { cost, pr_n, pr_beta, pr_nu, con_l, con_t })
}

pub fn payoff_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    i: usize,
) -> Result<f64> {
    let mut value = 0.0;
    for slot in 0..inst.horizon() {
        value += inst.utility(i, slot).value(m.user(i).y[slot])?;
    }
    Ok(value - tax_dist(inst, net, m, i)?.total())
}

/// Equilibrium profile for the distributed game: optimal demands and
/// multipliers as in the centralized construction, proxies equal to the
/// helped users' demands, and summaries aggregating each subtree.
pub fn construct_ne_dist(
    inst: &Instance,
    net: &TreeNetwork,
    sol: &CentralSolution,
    kkt_tol: f64,
) -> Result<DistMessageProfile> {
    let report = check_kkt(inst, sol, kkt_tol);
    if !report.pass {
        return Err(Error::KktFailed { tol: kkt_tol, residual: report.max_residual() });
    }
    let n = net.n_users();
    let l = inst.n_constraints();
    let mut users = Vec::with_capacity(n);
    for i in 0..n {
        let mut beta = BTreeMap::new();
        for j in net.helped_by(i) {
            beta.insert(j, sol.x.row(j).transpose());
        }
        let mut n_summary = BTreeMap::new();
        let mut nu_summary = BTreeMap::new();
        for &j in net.neighbors(i) {
            let members: Vec<usize> =
                (0..n).filter(|&h| h != i && nearest_via(net, i, h) == j).collect();
            let rows = DVector::from_fn(l, |row, _| {
                members
                    .iter()
                    .map(|&h| inst.user_row_dot(row, h, &sol.x.row(h).transpose()))
                    .sum()
            });
            let slots = DVector::from_fn(inst.horizon(), |slot, _| {
                members.iter().map(|&h| sol.x[(h, slot)]).sum()
            });
            n_summary.insert(j, rows);
            nu_summary.insert(j, slots);
        }
        users.push(DistUserMessage {
            y: sol.x.row(i).transpose(),
            q: sol.lambda.clone(),
            s: sol.mu.clone(),
            beta,
            n_summary,
            nu_summary,
        });
    }
    Ok(DistMessageProfile::new(users))
}

fn best_dist_deviation_for_user(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    i: usize,
    cfg: &NeVerifyConfig,
) -> Result<UserDeviation> {
    let base = payoff_dist(inst, net, m, i)?;
    let view = Neighborhood::slice(net, m, i);
    let agg = dist_aggregates(inst, net, &view)?;
    let mut scratch = m.clone();
    let mut best = UserDeviation {
        user: i,
        improvement: f64::NEG_INFINITY,
        kind: DeviationKind::Demand { slot: 0 },
        proposed: None,
    };
    let consider =
        |imp: f64, kind: DeviationKind, proposed: Option<f64>, best: &mut UserDeviation| {
            if imp > best.improvement {
                *best = UserDeviation { user: i, improvement: imp, kind, proposed };
            }
        };

    for slot in 0..inst.horizon() {
        let u = *inst.utility(i, slot);
        let original = scratch.user(i).y[slot];
        let mut eval = |v: f64| {
            scratch.user_mut(i).y[slot] = v;
            payoff_dist(inst, net, &scratch, i)
                .expect("demand probe stays inside the utility domain")
        };
        let (y_best, f_best) =
            golden_max(&mut eval, u.domain_lo, u.domain_hi, cfg.line_search_tol);
        scratch.user_mut(i).y[slot] = original;
        consider(f_best - base, DeviationKind::Demand { slot }, Some(y_best), &mut best);
    }
    for row in 0..inst.n_constraints() {
        let mut slack = inst.constraint_rhs()[row];
        for rows in agg.f_rows.values() {
            slack -= rows[row];
        }
        slack -= inst.user_row_dot(row, i, &agg.beta_in);
        let vertex = (agg.q_minus[row] - slack / 2.0).max(0.0);
        let original = scratch.user(i).q[row];
        scratch.user_mut(i).q[row] = vertex;
        let probe = payoff_dist(inst, net, &scratch, i)?;
        scratch.user_mut(i).q[row] = original;
        consider(probe - base, DeviationKind::ConstraintPrice { row }, Some(vertex), &mut best);
    }
    for slot in 0..inst.horizon() {
        let gap = agg.z_minus - agg.zeta_minus[slot];
        let vertex = (agg.s_minus[slot] - gap / 2.0).max(0.0);
        let original = scratch.user(i).s[slot];
        scratch.user_mut(i).s[slot] = vertex;
        let probe = payoff_dist(inst, net, &scratch, i)?;
        scratch.user_mut(i).s[slot] = original;
        consider(probe - base, DeviationKind::PeakPrice { slot }, Some(vertex), &mut best);
    }
    for j in net.helped_by(i) {
        let target = view.neighbor(j)?.y.clone();
        for slot in 0..inst.horizon() {
            let original = scratch.user(i).beta[&j][slot];
            scratch.user_mut(i).beta.get_mut(&j).unwrap()[slot] = target[slot];
            let probe = payoff_dist(inst, net, &scratch, i)?;
            scratch.user_mut(i).beta.get_mut(&j).unwrap()[slot] = original;
            consider(
                probe - base,
                DeviationKind::ProxyFor { user: j, slot },
                Some(target[slot]),
                &mut best,
            );
        }
    }
    for &j in net.neighbors(i) {
        for row in 0..inst.n_constraints() {
            let vertex = agg.f_rows[&j][row];
            let original = scratch.user(i).n_summary[&j][row];
            scratch.user_mut(i).n_summary.get_mut(&j).unwrap()[row] = vertex;
            let probe = payoff_dist(inst, net, &scratch, i)?;
            scratch.user_mut(i).n_summary.get_mut(&j).unwrap()[row] = original;
            consider(
                probe - base,
                DeviationKind::SummaryN { neighbor: j, row },
                Some(vertex),
                &mut best,
            );
        }
        for slot in 0..inst.horizon() {
            let vertex = agg.f_slots[&j][slot];
            let original = scratch.user(i).nu_summary[&j][slot];
            scratch.user_mut(i).nu_summary.get_mut(&j).unwrap()[slot] = vertex;
            let probe = payoff_dist(inst, net, &scratch, i)?;
            scratch.user_mut(i).nu_summary.get_mut(&j).unwrap()[slot] = original;
            consider(
                probe - base,
                DeviationKind::SummaryNu { neighbor: j, slot },
                Some(vertex),
                &mut best,
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    for sample in 0..cfg.deviation_samples {
        {
            let msg = scratch.user_mut(i);
            for slot in 0..inst.horizon() {
                let u = inst.utility(i, slot);
                msg.y[slot] = rng.gen_range(u.domain_lo..=u.domain_hi);
                msg.s[slot] = (m.user(i).s[slot]
                    + rng.gen_range(-1.0..1.0) * (1.0 + m.user(i).s[slot]))
                .max(0.0);
            }
            for row in 0..inst.n_constraints() {
                msg.q[row] = (m.user(i).q[row]
                    + rng.gen_range(-1.0..1.0) * (1.0 + m.user(i).q[row]))
                .max(0.0);
            }
            for (j, proxy) in msg.beta.iter_mut() {
                for slot in 0..proxy.len() {
                    let orig = m.user(i).beta[j][slot];
                    proxy[slot] = orig + rng.gen_range(-1.0..1.0) * (1.0 + orig.abs());
                }
            }
            for (j, rows) in msg.n_summary.iter_mut() {
                for row in 0..rows.len() {
                    let orig = m.user(i).n_summary[j][row];
                    rows[row] = orig + rng.gen_range(-1.0..1.0) * (1.0 + orig.abs());
                }
            }
            for (j, slots) in msg.nu_summary.iter_mut() {
                for slot in 0..slots.len() {
                    let orig = m.user(i).nu_summary[j][slot];
                    slots[slot] = orig + rng.gen_range(-1.0..1.0) * (1.0 + orig.abs());
                }
            }
        }
        let probe = payoff_dist(inst, net, &scratch, i)?;
        consider(probe - base, DeviationKind::Joint { sample }, None, &mut best);
        scratch.users[i] = m.user(i).clone();
    }
    Ok(best)
}

/// Equilibrium certificate for the distributed game, probing every message
/// coordinate (including proxies and summaries) and random joint deviations.
pub fn verify_ne_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    cfg: &NeVerifyConfig,
) -> Result<NeReport> {
    m.validate(inst, net)?;
    let per_user: Result<Vec<UserDeviation>> = (0..m.n_users())
        .into_par_iter()
        .map(|i| best_dist_deviation_for_user(inst, net, m, i, cfg))
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

#[derive(Debug, Clone)]
pub struct SummaryConsistency {
    /// Max defect of the neighbor recursion for the constraint summaries.
    pub recursion_n: f64,
    /// Max defect of the neighbor recursion for the peak summaries.
    pub recursion_nu: f64,
    /// Max defect of the subtree closed form against the supplied demands.
    pub closed_form_n: f64,
    pub closed_form_nu: f64,
    /// Max defect of the whole-community sums.
    pub sum_n: f64,
    pub sum_nu: f64,
    pub pass: bool,
}

/// Verify the summary-message recursions, their subtree closed forms against
/// `sol_y`, and the aggregate sums over each neighborhood.
pub fn check_summary_consistency(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    sol_y: &DMatrix<f64>,
    tol: f64,
) -> SummaryConsistency {
    let n = net.n_users();
    let l = inst.n_constraints();
    let t = inst.horizon();
    let mut recursion_n = 0.0f64;
    let mut recursion_nu = 0.0f64;
    let mut closed_form_n = 0.0f64;
    let mut closed_form_nu = 0.0f64;
    let mut sum_n = 0.0f64;
    let mut sum_nu = 0.0f64;
    for i in 0..n {
        let mut total_rows = DVector::zeros(l);
        let mut total_slots = DVector::zeros(t);
        for &j in net.neighbors(i) {
            let msg_j = m.user(j);
            let mut rows = DVector::from_fn(l, |row, _| inst.user_row_dot(row, j, &msg_j.y));
            let mut slots = msg_j.y.clone();
            for &h in net.neighbors(j) {
                if h != i {
                    rows += &msg_j.n_summary[&h];
                    slots += &msg_j.nu_summary[&h];
                }
            }
            recursion_n = recursion_n.max((&m.user(i).n_summary[&j] - &rows).amax());
            recursion_nu = recursion_nu.max((&m.user(i).nu_summary[&j] - &slots).amax());
            total_rows += &rows;
            total_slots += &slots;

            let members: Vec<usize> =
                (0..n).filter(|&h| h != i && nearest_via(net, i, h) == j).collect();
            for row in 0..l {
                let expected: f64 = members
                    .iter()
                    .map(|&h| inst.user_row_dot(row, h, &sol_y.row(h).transpose()))
                    .sum();
                closed_form_n =
                    closed_form_n.max((m.user(i).n_summary[&j][row] - expected).abs());
            }
            for slot in 0..t {
                let expected: f64 = members.iter().map(|&h| sol_y[(h, slot)]).sum();
                closed_form_nu =
                    closed_form_nu.max((m.user(i).nu_summary[&j][slot] - expected).abs());
            }
        }
        for row in 0..l {
            let expected: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| inst.user_row_dot(row, j, &m.user(j).y))
                .sum();
            sum_n = sum_n.max((total_rows[row] - expected).abs());
        }
        for slot in 0..t {
            let expected: f64 =
                (0..n).filter(|&j| j != i).map(|j| m.user(j).y[slot]).sum();
            sum_nu = sum_nu.max((total_slots[slot] - expected).abs());
        }
    }
    let worst = recursion_n
        .max(recursion_nu)
        .max(closed_form_n)
        .max(closed_form_nu)
        .max(sum_n)
        .max(sum_nu);
    SummaryConsistency {
        recursion_n,
        recursion_nu,
        closed_form_n,
        closed_form_nu,
        sum_n,
        sum_nu,
        pass: worst <= tol,
    }
}

/// Rebated tax over neighborhood price averages.
pub fn rebate_tax_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    i: usize,
) -> Result<f64> {
    let view = Neighborhood::slice(net, m, i);
    let agg = dist_aggregates(inst, net, &view)?;
    let refund: f64 = (0..inst.n_constraints())
        .map(|l| agg.q_minus[l] * inst.constraint_rhs()[l])
        .sum();
    Ok(tax_dist(inst, net, m, i)?.total() - refund / net.n_users() as f64)
}

pub fn budget_report_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
) -> Result<BudgetReport> {
    let n = m.n_users();
    let x = DMatrix::from_fn(n, inst.horizon(), |i, t| m.user(i).y[t]);
    let cost = community_cost(inst, &x);
    let mut gross = -cost;
    let mut rebated = -cost;
    for i in 0..n {
        gross += tax_dist(inst, net, m, i)?.total();
        rebated += rebate_tax_dist(inst, net, m, i)?;
    }
    Ok(BudgetReport { gross, rebated })
}

pub fn check_ir_dist(
    inst: &Instance,
    net: &TreeNetwork,
    m: &DistMessageProfile,
    tol: f64,
) -> Result<IrReport> {
    let mut per_user = Vec::with_capacity(m.n_users());
    for i in 0..m.n_users() {
        let value = payoff_dist(inst, net, m, i)?;
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
    use crate::mech_central::{construct_ne, tax};
    use crate::oracle::solve_centralized;

    fn path_network() -> TreeNetwork {
        fixtures::example_network()
    }

    #[test]
    fn spanning_tree_keeps_paths_and_breaks_cycles() {
        let path = spanning_tree(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.edges(), &[(0, 1), (1, 2)]);
        let triangle = spanning_tree(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(triangle.edges(), &[(0, 1), (0, 2)]);
        assert!(matches!(
            spanning_tree(4, &[(0, 1), (2, 3)]),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn nearest_via_examples() {
        let net = path_network();
        assert_eq!(nearest_via(&net, 0, 2), 1);
        for i in 0..3 {
            assert_eq!(nearest_via(&net, i, i), i);
        }
        assert_eq!(nearest_via(&net, 1, 0), 0);
        assert_eq!(nearest_via(&net, 1, 2), 2);
    }

    #[test]
    fn helper_assignment() {
        let net = path_network();
        // the lowest-index rule reproduces the reference helper map on the path
        assert_eq!(assign_helpers(&net, &HelperPolicy::LowestIndex).unwrap(), vec![1, 0, 1]);
        assert_eq!(
            assign_helpers(&net, &HelperPolicy::Explicit(vec![1, 0, 1])).unwrap(),
            vec![1, 0, 1]
        );
        assert!(matches!(
            assign_helpers(&net, &HelperPolicy::Explicit(vec![1, 0, 0])),
            Err(Error::InvalidHelper { user: 2, helper: 0 })
        ));
    }

    fn fixture_dist_ne() -> (Instance, TreeNetwork, DistMessageProfile) {
        let inst = fixtures::example_instance();
        let net = path_network();
        let sol = solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne_dist(&inst, &net, &sol, 1e-6).unwrap();
        (inst, net, m)
    }

    #[test]
    fn constructed_summaries_follow_the_subtrees() {
        let inst = fixtures::example_instance();
        let net = path_network();
        let sol = solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne_dist(&inst, &net, &sol, 1e-6).unwrap();
        // nu[2,1] (1-based) covers exactly user 1
        let nu_10 = &m.user(1).nu_summary[&0];
        assert!((nu_10[0] - sol.x[(0, 0)]).abs() < 1e-12);
        assert!((nu_10[1] - sol.x[(0, 1)]).abs() < 1e-12);
        // nu[1,2] covers the subtree {2, 3}
        let nu_01 = &m.user(0).nu_summary[&1];
        assert!((nu_01[0] - (sol.x[(1, 0)] + sol.x[(2, 0)])).abs() < 1e-12);
        // leaves carry an empty inner sum: n[2,3,l] = a^{3,l} . x^3
        let n_12 = &m.user(1).n_summary[&2];
        for l in 0..7 {
            let direct = inst.user_row_dot(l, 2, &sol.x.row(2).transpose());
            assert!((n_12[l] - direct).abs() < 1e-12);
        }
        // the equilibrium allocation is the optimum itself
        for i in 0..3 {
            assert_eq!(m.user(i).y, sol.x.row(i).transpose());
        }
    }

    /// Literal expansion of the third user's tax on the path network,
    /// written out separately as an oracle for `tax_dist`.
    fn user3_tax_expansion(
        inst: &Instance,
        m: &DistMessageProfile,
    ) -> f64 {
        let p0 = inst.peak_price();
        let m2 = m.user(1);
        let m3 = m.user(2);
        let q_minus: Vec<f64> = (0..7).map(|l| m2.q[l]).collect();
        let s_minus = [m2.s[0], m2.s[1]];
        let zeta = [
            m2.beta[&2][0] + m2.y[0] + m2.nu_summary[&0][0],
            m2.beta[&2][1] + m2.y[1] + m2.nu_summary[&0][1],
        ];
        let z = zeta[0].max(zeta[1]);
        let rp = radial_pricing(
            &DVector::from_row_slice(&s_minus),
            &DVector::from_row_slice(&zeta),
            p0,
            PEAK_TOL,
        );
        let mut tax = (0.1 + rp[0]) * m3.y[0] + (0.2 + rp[1]) * m3.y[1];
        tax += q_minus[4] * -m3.y[0] + q_minus[5] * -m3.y[1] + q_minus[6] * (m3.y[0] + m3.y[1]);
        // f[3,2,l] for the seven rows
        let f = |l: usize| inst.user_row_dot(l, 1, &m2.y) + m2.n_summary[&0][l];
        for l in 0..7 {
            let a_beta = inst.user_row_dot(l, 2, &m2.beta[&2]);
            let slack = inst.constraint_rhs()[l] - f(l) - a_beta;
            tax += (m3.q[l] - q_minus[l]).powi(2) + m3.q[l] * slack;
            tax += (m3.n_summary[&1][l] - f(l)).powi(2);
        }
        for t in 0..2 {
            tax += (m3.s[t] - s_minus[t]).powi(2) + m3.s[t] * (z - zeta[t]);
            tax += (m3.nu_summary[&1][t] - m2.y[t] - m2.nu_summary[&0][t]).powi(2);
        }
        tax
    }

    #[test]
    fn user3_tax_matches_the_literal_expansion() {
        let (inst, net, ne) = fixture_dist_ne();
        // at the equilibrium profile and at randomly jittered profiles
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let mut m = ne.clone();
            if trial > 0 {
                for i in 0..3 {
                    let user = m.user_mut(i);
                    user.y.apply(|v| *v += rng.gen_range(-0.3..0.3));
                    user.q.apply(|v| *v = (*v + rng.gen_range(-0.2..0.2)).max(0.0));
                    user.s.apply(|v| *v = (*v + rng.gen_range(-0.02..0.02)).max(0.0));
                    for vec in user.beta.values_mut() {
                        vec.apply(|v| *v += rng.gen_range(-0.3..0.3));
                    }
                    for vec in user.n_summary.values_mut() {
                        vec.apply(|v| *v += rng.gen_range(-0.3..0.3));
                    }
                    for vec in user.nu_summary.values_mut() {
                        vec.apply(|v| *v += rng.gen_range(-0.3..0.3));
                    }
                }
            }
            let direct = user3_tax_expansion(&inst, &m);
            let computed = tax_dist(&inst, &net, &m, 2).unwrap().total();
            assert!(
                (computed - direct).abs() < 1e-10,
                "trial {trial}: {computed} vs {direct}"
            );
        }
    }

    #[test]
    fn tax_is_local_to_the_neighborhood() {
        let (inst, net, ne) = fixture_dist_ne();
        let baseline = tax_dist(&inst, &net, &ne, 2).unwrap();
        let mut tampered = ne.clone();
        // user 1 is not a neighbor of user 3 on the path
        tampered.user_mut(0).y[0] = 42.0;
        tampered.user_mut(0).q[6] = 9.9;
        tampered.user_mut(0).n_summary.get_mut(&1).unwrap()[3] = -5.0;
        let after = tax_dist(&inst, &net, &tampered, 2).unwrap();
        assert_eq!(baseline.total().to_bits(), after.total().to_bits());
    }

    #[test]
    fn summary_consistency_at_ne_and_under_noise() {
        let (inst, net, ne) = fixture_dist_ne();
        let sol = solve_centralized(&inst, &Default::default()).unwrap();
        let report = check_summary_consistency(&inst, &net, &ne, &sol.x, 1e-10);
        assert!(report.pass, "{report:?}");

        let mut noisy = ne.clone();
        noisy.user_mut(1).n_summary.get_mut(&0).unwrap()[6] += 0.125;
        let report = check_summary_consistency(&inst, &net, &noisy, &sol.x, 1e-10);
        assert!(!report.pass);
        assert!((report.closed_form_n - 0.125).abs() < 1e-9);
    }

    #[test]
    fn two_user_network_has_no_third_party_terms() {
        let u = |c: f64| crate::model::UtilityFunction::scaled_log(c, 2.0, -1.0, 5.0).unwrap();
        let mut a = DMatrix::zeros(1, 2);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 1.0;
        let inst = Instance::new(
            2,
            1,
            vec![u(1.0), u(2.0)],
            vec![0.1],
            0.02,
            a,
            vec![2.0],
        )
        .unwrap();
        let net = TreeNetwork::new(2, &[(0, 1)]).unwrap();
        let sol = solve_centralized(&inst, &Default::default()).unwrap();
        let m = construct_ne_dist(&inst, &net, &sol, 1e-6).unwrap();
        // f^{1,2,l} = a^{2,l} y^2 exactly: the summary toward user 2 is her own row
        let report = check_summary_consistency(&inst, &net, &m, &sol.x, 1e-10);
        assert!(report.pass);
        let cfg = NeVerifyConfig { deviation_samples: 200, ..Default::default() };
        assert!(verify_ne_dist(&inst, &net, &m, &cfg).unwrap().pass);
    }

    #[test]
    fn tampered_peak_summary_is_detected_and_restored() {
        let (inst, net, ne) = fixture_dist_ne();
        let mut tampered = ne.clone();
        let original = tampered.user(1).nu_summary[&0][0];
        tampered.user_mut(1).nu_summary.get_mut(&0).unwrap()[0] += 0.05;
        let cfg = NeVerifyConfig { deviation_samples: 100, ..Default::default() };
        let report = verify_ne_dist(&inst, &net, &tampered, &cfg).unwrap();
        assert!(!report.pass);
        let dev = &report.per_user[1];
        assert_eq!(dev.kind, DeviationKind::SummaryNu { neighbor: 0, slot: 0 });
        assert!((dev.proposed.unwrap() - original).abs() < 1e-9);
    }

    #[test]
    fn distributed_taxes_match_centralized_at_ne() {
        let (inst, net, m) = fixture_dist_ne();
        let sol = solve_centralized(&inst, &Default::default()).unwrap();
        let central = construct_ne(&inst, &sol, 1e-6).unwrap();
        for i in 0..3 {
            let a = tax_dist(&inst, &net, &m, i).unwrap().total();
            let b = tax(&inst, &central, i).total();
            assert!((a - b).abs() < 1e-9, "user {i}: {a} vs {b}");
        }
    }

    #[test]
    fn budget_and_ir_audits_hold_at_distributed_ne() {
        let (inst, net, m) = fixture_dist_ne();
        let budget = budget_report_dist(&inst, &net, &m).unwrap();
        assert!(budget.gross > 0.0);
        // the solved optimum carries its KKT residual into the slackness terms
        assert!(budget.rebated.abs() < 1e-6);
        assert!(check_ir_dist(&inst, &net, &m, 1e-9).unwrap().pass);

        // at the published reference values the binding slacks vanish exactly
        let reference = fixtures::reference_solution();
        let m_ref = construct_ne_dist(&inst, &net, &reference, 1e-3).unwrap();
        let budget = budget_report_dist(&inst, &net, &m_ref).unwrap();
        assert!((budget.gross - 2.4168).abs() < 1e-6);
        assert!(budget.rebated.abs() < 1e-9);
    }
}
