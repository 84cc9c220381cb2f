//! Coefficient algebra of momentum SGD under a frozen gradient.
//!
//! If every step sees the same gradient `g` and the run starts from
//! `v_1 = 0, φ_1 = φ`, then `v_t = b^v_t g + c^v_t φ` and
//! `φ_t = b^φ_t g + c^φ_t φ` with scalar coefficients that follow a linear
//! recurrence in `(η, μ, ω)`. Two-step gradient reuse, viewed through one
//! step of a different momentum SGD, must match these coefficients at every
//! odd index; [`induced_one_step`] solves the first three matches for the
//! only candidate hyper-parameters and [`prop1_witness`] shows the next
//! match fails.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, HyperParams, OptState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffState {
    pub b_v: f64,
    pub c_v: f64,
    pub b_phi: f64,
    pub c_phi: f64,
    pub t: usize,
}

impl CoeffState {
    pub fn initial() -> Self {
        Self {
            b_v: 0.0,
            c_v: 0.0,
            b_phi: 0.0,
            c_phi: 1.0,
            t: 1,
        }
    }

    /// Recurrence coefficients for `(η, μ, ω)`, which need not be a valid
    /// [`HyperParams`] (the induced momentum can exceed one).
    pub fn next(&self, eta: f64, mu: f64, omega: f64) -> Self {
        Self {
            b_v: mu * self.b_v + 1.0 + omega * self.b_phi,
            c_v: mu * self.c_v + omega * self.c_phi,
            b_phi: -eta * mu * self.b_v - eta + (1.0 - eta * omega) * self.b_phi,
            c_phi: -eta * mu * self.c_v + (1.0 - eta * omega) * self.c_phi,
            t: self.t + 1,
        }
    }
}

fn recursion_raw(eta: f64, mu: f64, omega: f64, t_max: usize) -> Vec<CoeffState> {
    let mut out = Vec::with_capacity(t_max);
    let mut c = CoeffState::initial();
    out.push(c);
    while out.len() < t_max {
        c = c.next(eta, mu, omega);
        out.push(c);
    }
    out
}

/// Coefficients for `t = 1 ..= t_max`; index `i` holds `t = i + 1`.
pub fn coeff_recursion(hp: &HyperParams, t_max: usize) -> Vec<CoeffState> {
    assert!(t_max >= 2, "t_max must be at least 2");
    recursion_raw(hp.eta, hp.mu, hp.omega, t_max)
}

/// Runs the real dynamics with a frozen gradient; states for `t = 1 ..= t_max`.
pub fn simulate_frozen(
    hp: &HyperParams,
    phi0: &Tensor,
    g: &Tensor,
    t_max: usize,
) -> Result<Vec<OptState>> {
    if phi0.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: phi0.len(),
            got: g.len(),
        });
    }
    let mut states = vec![OptState::initial(phi0.clone())];
    for _ in 1..t_max {
        let next = dynamics::step(states.last().unwrap(), g, hp)?;
        states.push(next);
    }
    Ok(states)
}

/// Candidate one-step hyper-parameters `(η̃, ω̃, μ̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InducedHypers {
    pub eta_t: f64,
    pub omega_t: f64,
    pub mu_t: f64,
}

/// Solves `b̃^φ_2 = b^φ_3`, `c̃^φ_2 = c^φ_3` and `b̃^φ_3 = b^φ_5`.
pub fn induced_one_step(hp: &HyperParams) -> Result<InducedHypers> {
    let HyperParams { eta, mu, omega } = *hp;
    let d = mu + 2.0 - eta * omega;
    if d <= 0.0 {
        return Err(Error::DegenerateDenominator(d));
    }
    let b5 = coeff_recursion(hp, 5)[4].b_phi;
    let eta_t = eta * d;
    let omega_t = (mu * omega + 2.0 * omega - eta * omega * omega) / d;
    let mu_t = -b5 / (eta * d) + eta * mu * omega - (1.0 - eta * omega).powi(2) - 1.0;
    Ok(InducedHypers {
        eta_t,
        omega_t,
        mu_t,
    })
}

/// Coefficients of the candidate one-step system.
pub fn tilde_recursion(induced: &InducedHypers, t_max: usize) -> Vec<CoeffState> {
    recursion_raw(induced.eta_t, induced.mu_t, induced.omega_t, t_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Witness {
    pub hp: HyperParams,
    pub induced: InducedHypers,
    pub b_tilde_4: f64,
    pub b_7: f64,
    pub gap: f64,
}

/// Compares `b̃^φ_4` against `b^φ_7`; a nonzero gap means two-step reuse is
/// not one step of momentum SGD for these hyper-parameters.
pub fn prop1_witness(hp: &HyperParams) -> Result<Prop1Witness> {
    let induced = induced_one_step(hp)?;
    let tilde = tilde_recursion(&induced, 4);
    let base = coeff_recursion(hp, 7);
    let b_tilde_4 = tilde[3].b_phi;
    let b_7 = base[6].b_phi;
    Ok(Prop1Witness {
        hp: *hp,
        induced,
        b_tilde_4,
        b_7,
        gap: (b_tilde_4 - b_7).abs(),
    })
}

/// `|b̃^φ_t − b^φ_{2t−1}|` for `t = 1 ..= t_max`.
pub fn matching_gaps(hp: &HyperParams, t_max: usize) -> Result<Vec<f64>> {
    let induced = induced_one_step(hp)?;
    let tilde = tilde_recursion(&induced, t_max.max(2));
    let base = coeff_recursion(hp, (2 * t_max - 1).max(2));
    Ok((1..=t_max)
        .map(|t| (tilde[t - 1].b_phi - base[2 * t - 2].b_phi).abs())
        .collect())
}
