//! Scenario and profile file formats (JSON). Scenario files describe an
//! instance declaratively (1-based user/slot indices, sparse constraint rows)
//! plus optional network and learning blocks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, UtilityFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub users: Vec<UserSpec>,
    pub prices: PriceSpec,
    pub constraints: ConstraintSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning: Option<LearningSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub utilities: Vec<UtilitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    #[serde(flatten)]
    pub family: FamilySpec,
    /// `[lo, hi]` demand bounds the utility is evaluated on.
    pub domain: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum FamilySpec {
    ScaledLog { weight: f64, shift: f64 },
    Quadratic { slope: f64, curvature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSpec {
    /// Per-slot unit prices; its length sets the horizon.
    pub unit: Vec<f64>,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub rows: Vec<ConstraintRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRow {
    /// Sparse coefficients as `[user, slot, value]`, 1-based user and slot.
    pub coeffs: Vec<(usize, usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Undirected edges, 1-based user indices.
    pub edges: Vec<(usize, usize)>,
    /// Optional helper map, 1-based (`"1": 2` means user 2 quotes user 1's proxy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    /// N x T derivative lower bounds.
    pub lo: Vec<Vec<f64>>,
    /// N x T derivative upper bounds.
    pub hi: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Rebuild the declarative description of an instance (network/learning blocks
/// are not part of an `Instance` and are left empty).
pub fn scenario_from_instance(inst: &Instance) -> Scenario {
    let users = (0..inst.n_users())
        .map(|i| UserSpec {
            utilities: (0..inst.horizon())
                .map(|t| {
                    let u = inst.utility(i, t);
                    UtilitySpec {
                        family: match u.family {
                            UtilityFamily::ScaledLog { weight, shift } => {
                                FamilySpec::ScaledLog { weight, shift }
                            }
                            UtilityFamily::Quadratic { slope, curvature } => {
                                FamilySpec::Quadratic { slope, curvature }
                            }
                        },
                        domain: [u.domain_lo, u.domain_hi],
                    }
                })
                .collect(),
        })
        .collect();
    let rows = (0..inst.n_constraints())
        .map(|l| {
            let mut coeffs = Vec::new();
            for i in 0..inst.n_users() {
                for t in 0..inst.horizon() {
                    let v = inst.coeff(l, i, t);
                    if v != 0.0 {
                        coeffs.push((i + 1, t + 1, v));
                    }
                }
            }
            ConstraintRow { coeffs, rhs: inst.constraint_rhs()[l] }
        })
        .collect();
    Scenario {
        users,
        prices: PriceSpec {
            unit: inst.unit_prices().iter().cloned().collect(),
            peak: inst.peak_price(),
        },
        constraints: ConstraintSpec { rows },
        network: None,
        learning: None,
    }
}

/// On-disk message profile for the centralized game (`verify` subcommand input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub users: Vec<ProfileUser>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileUser {
    pub y: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ProfileFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, inst: &Instance) -> Result<()> {
        if self.users.len() != inst.n_users() {
            return Err(Error::DimensionMismatch(format!(
                "profile has {} users, instance has {}",
                self.users.len(),
                inst.n_users()
            )));
        }
        for (i, u) in self.users.iter().enumerate() {
            let t = inst.horizon();
            let l = inst.n_constraints();
            if u.y.len() != t || u.s.len() != t || u.beta.len() != t || u.q.len() != l {
                return Err(Error::DimensionMismatch(format!(
                    "profile user {}: expected y/s/beta of length {t} and q of length {l}",
                    i + 1
                )));
            }
            if u.q.iter().chain(&u.s).any(|v| *v < 0.0 || !v.is_finite())
                || u.y.iter().chain(&u.beta).any(|v| !v.is_finite())
            {
                return Err(Error::Scenario(format!(
                    "profile user {}: q and s must be finite and nonnegative, y and beta finite",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}
