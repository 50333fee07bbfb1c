//! Closed-form pNML quantities for a single-layer softmax model.
//!
//! For a test embedding `x` the learner adds `(x, e_i)` to the training set
//! for every label `i`, refits with the recursive least-squares update and
//! reads off the probability of `i`. With `p_i` the ERM probability and
//! `xᵀg` the gain statistic this refit probability has the closed form
//!
//! ```text
//! genie_i = p_i / (p_i + p_i^{xᵀg} (1 - p_i))
//! ```
//!
//! The regret is `Γ = ln Σ_i genie_i` and the pNML posterior is
//! `q_i = genie_i / exp(Γ)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{l2_norm, project_orth, PnmlStats};

/// Default relative threshold on `‖x⊥‖ / ‖x‖` separating the two gain branches.
pub const DEFAULT_ORTH_TOL: f64 = 1e-6;

/// Interior probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
pub const PROB_CLIP: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return invalid(format!("need at least 2 classes, got {}", probs.len()));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return invalid(format!("probability {} at index {i} is outside [0, 1]", probs[i]));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self(probs))
    }

    /// Callers guarantee the simplex invariants.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    /// Largest probability.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first largest probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = crate::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Which form of the gain vector `g` applies to a test vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainBranch {
    /// `x` has a component outside the training row space: `xᵀg = 1`.
    Orthogonal,
    /// `x` lies in the training row space: `xᵀg = q / (1 + q)`.
    RowSpace,
    /// `x` is the zero vector: `xᵀg = 0`.
    Zero,
}

/// The statistic `xᵀg` with the branch that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xtg {
    pub value: f64,
    pub branch: GainBranch,
}

/// Computes `xᵀg` for a test vector.
///
/// When `‖x⊥‖ > orth_tol·‖x‖` the result is exactly 1, otherwise it is
/// `q / (1 + q)` with `q = xᵀ X⁺X⁺ᵀ x`.
pub fn x_top_g(x: &[f64], stats: &PnmlStats, orth_tol: f64) -> Result<f64> {
    x_top_g_detail(x, stats, orth_tol).map(|r| r.value)
}

pub fn x_top_g_detail(x: &[f64], stats: &PnmlStats, orth_tol: f64) -> Result<Xtg> {
    if !(orth_tol.is_finite() && orth_tol >= 0.0) {
        return invalid(format!("orthogonality tolerance must be nonnegative, got {orth_tol}"));
    }
    let orth = project_orth(x, stats)?;
    let norm = l2_norm(x);
    if norm == 0.0 {
        return Ok(Xtg {
            value: 0.0,
            branch: GainBranch::Zero,
        });
    }
    if l2_norm(&orth) > orth_tol * norm {
        return Ok(Xtg {
            value: 1.0,
            branch: GainBranch::Orthogonal,
        });
    }
    let q = stats.quad_form(x)?;
    Ok(Xtg {
        value: q / (1.0 + q),
        branch: GainBranch::RowSpace,
    })
}

fn check_xtg(xtg: f64) -> Result<()> {
    if !(xtg.is_finite() && xtg >= 0.0) {
        return invalid(format!("xtg must be finite and nonnegative, got {xtg}"));
    }
    Ok(())
}

/// Genie probability with the boundary conventions `p = 0 -> 0`, `p = 1 -> 1`.
fn genie_term(p: f64, xtg: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        p / (p + p.powf(xtg) * (1.0 - p))
    }
}

/// Probability the genie assigns to label `c` after refitting with it.
pub fn genie_prob(p_c: f64, xtg: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_c) {
        return invalid(format!("probability must lie in [0, 1], got {p_c}"));
    }
    check_xtg(xtg)?;
    Ok(genie_term(p_c, xtg))
}

/// Clips interior probabilities away from 0 and 1. Exact zeros and ones are
/// kept so the boundary conventions apply to them; when clipping changed
/// anything the interior entries are rescaled to restore the unit sum.
fn clipped(p: &[f64]) -> Vec<f64> {
    let mut out = p.to_vec();
    let mut changed = false;
    for v in out.iter_mut().filter(|v| **v > 0.0 && **v < 1.0) {
        let c = v.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        changed |= c != *v;
        *v = c;
    }
    if changed {
        let boundary: f64 = out.iter().filter(|v| **v == 0.0 || **v == 1.0).sum();
        let interior: f64 = out.iter().filter(|v| **v > 0.0 && **v < 1.0).sum();
        let target = 1.0 - boundary;
        if target > 0.0 && interior > 0.0 {
            let scale = target / interior;
            out.iter_mut()
                .filter(|v| **v > 0.0 && **v < 1.0)
                .for_each(|v| *v *= scale);
        }
    }
    out
}

/// Per-label genie probabilities for an ERM prediction.
pub fn genie_probs(p: &ProbVector, xtg: f64) -> Result<Vec<f64>> {
    check_xtg(xtg)?;
    Ok(clipped(p.probs())
        .into_iter()
        .map(|pi| genie_term(pi, xtg))
        .collect())
}

fn log_normalizer(genie: &[f64]) -> f64 {
    let k: f64 = genie.iter().sum();
    k.ln().clamp(0.0, (genie.len() as f64).ln())
}

/// pNML regret `Γ = ln Σ_i genie_i` in nats.
///
/// `xtg` values above 1 are accepted for simulation; scoring only produces
/// values in `[0, 1]`.
pub fn regret(p: &ProbVector, xtg: f64) -> Result<f64> {
    Ok(log_normalizer(&genie_probs(p, xtg)?))
}

/// pNML posterior `q_i = genie_i / Σ_j genie_j`.
pub fn pnml_posterior(p: &ProbVector, xtg: f64) -> Result<ProbVector> {
    let genie = genie_probs(p, xtg)?;
    Ok(normalize_genie(&genie))
}

fn normalize_genie(genie: &[f64]) -> ProbVector {
    let k: f64 = genie.iter().sum();
    // Every simplex has an entry >= 1/C whose genie term is positive.
    assert!(k > 0.0, "pNML normalization factor vanished");
    ProbVector::from_raw(genie.iter().map(|g| g / k).collect())
}

/// Per-sample scoring record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretScore {
    pub xtg: f64,
    /// Regret in nats; higher means less trustworthy.
    pub regret: f64,
    pub pnml_posterior: ProbVector,
    /// Max ERM probability.
    pub baseline: f64,
    pub genie_probs: Vec<f64>,
}

impl RegretScore {
    pub fn compute(p: &ProbVector, xtg: f64) -> Result<Self> {
        let genie = genie_probs(p, xtg)?;
        Ok(Self {
            xtg,
            regret: log_normalizer(&genie),
            pnml_posterior: normalize_genie(&genie),
            baseline: p.max(),
            genie_probs: genie,
        })
    }
}

/// Two-class regret divided by `ln 2` along a grid of `xᵀg` values.
pub fn response_curve(p1: f64, xtg_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(p1 > 0.0 && p1 < 1.0) {
        return invalid(format!("p1 must lie in (0, 1), got {p1}"));
    }
    let p = ProbVector::new(vec![p1, 1.0 - p1])?;
    xtg_grid
        .iter()
        .map(|&t| Ok((t, regret(&p, t)? / std::f64::consts::LN_2)))
        .collect()
}
