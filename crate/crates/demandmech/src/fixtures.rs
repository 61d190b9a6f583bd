//! The bundled three-user, two-day example community, with its published
//! reference solution. The same scenario ships as
//! `fixtures/paper_example.json` for the CLI.

use nalgebra::{DMatrix, DVector};

use crate::mech_dist::{HelperPolicy, TreeNetwork};
use crate::model::{build_instance, Instance};
use crate::oracle::CentralSolution;
use crate::scenario::{
    BoundsSpec, ConstraintRow, ConstraintSpec, FamilySpec, LearningSpec, NetworkSpec, PriceSpec,
    Scenario, UserSpec, UtilitySpec,
};

/// Three users over two days: log utilities with weight `i*t`, unit prices
/// (0.1, 0.2), peak price 0.05, per-coordinate lower bounds of -1 and a
/// community-wide cap of 2, over a path network.
pub fn example_scenario() -> Scenario {
    let users = (1..=3usize)
        .map(|i| UserSpec {
            utilities: (1..=2usize)
                .map(|t| UtilitySpec {
                    family: FamilySpec::ScaledLog { weight: (i * t) as f64, shift: 2.0 },
                    domain: [-1.0, 7.0],
                })
                .collect(),
        })
        .collect();
    let mut rows: Vec<ConstraintRow> = Vec::with_capacity(7);
    for i in 1..=3 {
        for t in 1..=2 {
            rows.push(ConstraintRow { coeffs: vec![(i, t, -1.0)], rhs: 1.0 });
        }
    }
    let all = (1..=3).flat_map(|i| (1..=2).map(move |t| (i, t, 1.0))).collect();
    rows.push(ConstraintRow { coeffs: all, rhs: 2.0 });
    Scenario {
        users,
        prices: PriceSpec { unit: vec![0.1, 0.2], peak: 0.05 },
        constraints: ConstraintSpec { rows },
        network: Some(NetworkSpec {
            edges: vec![(1, 2), (2, 3)],
            phi: Some(
                [("1".to_string(), 2), ("2".to_string(), 1), ("3".to_string(), 2)]
                    .into_iter()
                    .collect(),
            ),
        }),
        learning: Some(LearningSpec {
            alpha: Some(0.1),
            iters: Some(100),
            stop_tol: None,
            bounds: Some(BoundsSpec {
                lo: (1..=3)
                    .map(|i| (1..=2).map(|t| (i * t) as f64 / 9.0).collect())
                    .collect(),
                hi: (1..=3).map(|i| (1..=2).map(|t| (i * t) as f64).collect()).collect(),
            }),
        }),
    }
}

pub fn example_instance() -> Instance {
    build_instance(&example_scenario()).expect("bundled scenario is valid")
}

/// The bundled path network 1-2-3 with the reference helper map.
pub fn example_network() -> TreeNetwork {
    TreeNetwork::new(3, &[(0, 1), (1, 2)])
        .and_then(|net| net.with_helpers(&HelperPolicy::Explicit(vec![1, 0, 1])))
        .expect("bundled network is valid")
}

/// Published optimal demands, rounded to four decimals.
pub fn reference_demands() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 2, &[-1.0000, -0.5246, -0.3410, 0.9508, 0.4885, 2.4263])
}

/// Published row multipliers (rows 2..6 are slack).
pub fn reference_lambda() -> DVector<f64> {
    DVector::from_vec(vec![0.2056, 0.0, 0.0, 0.0, 0.0, 0.0, 1.1056])
}

pub fn reference_mu() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 0.05])
}

pub fn reference_peak() -> f64 {
    2.8525
}

/// Exact multiplier of the community-wide sum row, from the closed-form
/// root of the stationarity system.
pub fn sum_row_multiplier() -> f64 {
    (249.0 + 106201f64.sqrt()) / 520.0
}

/// The published solution assembled into a `CentralSolution`.
pub fn reference_solution() -> CentralSolution {
    CentralSolution {
        x: reference_demands(),
        w: reference_peak(),
        lambda: reference_lambda(),
        mu: reference_mu(),
    }
}

/// Exact dual vector `(lambda, mu)` of the fixture.
pub fn exact_price_vector() -> DVector<f64> {
    let l7 = sum_row_multiplier();
    let mut v = DVector::zeros(9);
    v[0] = l7 + 0.1 - 1.0;
    v[6] = l7;
    v[8] = 0.05;
    v
}

/// The derivative bounds shipped in the scenario's learning block.
pub fn reference_bounds() -> (DMatrix<f64>, DMatrix<f64>) {
    let lo = DMatrix::from_fn(3, 2, |i, t| ((i + 1) * (t + 1)) as f64 / 9.0);
    let hi = DMatrix::from_fn(3, 2, |i, t| ((i + 1) * (t + 1)) as f64);
    (lo, hi)
}
