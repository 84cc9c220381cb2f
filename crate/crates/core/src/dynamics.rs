//! Momentum-SGD dynamics `s_{t+1} = Φ_t(s_t; θ)` and their adjoints.
//!
//! With state `s = (φ, v)`, gradient `g`, learning rate `η`, momentum `μ` and
//! weight decay `ω`:
//!
//! ```text
//! v' = μ v + g + ω φ
//! φ' = φ − η v'
//! ```
//!
//! A [`LagrangianState`] is the adjoint of a state: `(λ^φ, λ^v)` are the
//! partial derivatives of the meta-objective with respect to `(φ, v)`.
//! [`adjoint_step`] pulls it back through one step; the gradient's own
//! dependence on `φ` (and `θ`) enters through a caller-supplied second-order
//! product bound to the point where `g` was evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub mu: f64,
    pub omega: f64,
}

impl HyperParams {
    pub fn new(eta: f64, mu: f64, omega: f64) -> Result<Self> {
        let hp = Self { eta, mu, omega };
        hp.validate()?;
        Ok(hp)
    }

    /// Plain SGD, `μ = ω = 0`.
    pub fn sgd(eta: f64) -> Result<Self> {
        Self::new(eta, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidHyperParams(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::InvalidHyperParams(format!(
                "mu must be in [0, 1), got {}",
                self.mu
            )));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidHyperParams(format!(
                "omega must be >= 0, got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub phi: Tensor,
    pub vel: Tensor,
    pub step_index: usize,
}

impl OptState {
    /// Initial state `s_1` with zero velocity.
    pub fn initial(phi: Tensor) -> Self {
        let vel = Tensor::zeros(phi.shape());
        Self {
            phi,
            vel,
            step_index: 1,
        }
    }

    pub fn nbytes(&self) -> usize {
        self.phi.nbytes() + self.vel.nbytes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lam_phi: Tensor,
    pub lam_vel: Tensor,
    pub step_index: usize,
}

impl LagrangianState {
    /// Terminal adjoint for a meta-objective that reads only `φ_{T+1}`:
    /// the velocity block is exactly zero.
    pub fn terminal(dl_dphi: Tensor, step_index: usize) -> Self {
        let lam_vel = Tensor::zeros(dl_dphi.shape());
        Self {
            lam_phi: dl_dphi,
            lam_vel,
            step_index,
        }
    }

    /// The direction `λ^v − η λ^φ` that multiplies `∂g/∂(·)` in both the
    /// adjoint and the θ-contribution of a step.
    pub fn gradient_direction(&self, hp: &HyperParams) -> Tensor {
        self.lam_vel
            .zip_map(&self.lam_phi, |lv, lp| lv - hp.eta * lp)
    }
}

/// One momentum-SGD step with externally supplied gradient `g`.
pub fn step(s: &OptState, g: &Tensor, hp: &HyperParams) -> Result<OptState> {
    if g.len() != s.phi.len() || s.vel.len() != s.phi.len() {
        return Err(Error::DimensionMismatch {
            expected: s.phi.len(),
            got: if g.len() != s.phi.len() {
                g.len()
            } else {
                s.vel.len()
            },
        });
    }
    let HyperParams { eta, mu, omega } = *hp;
    let mut vel = s.vel.clone();
    let mut phi = s.phi.clone();
    for ((v, p), &gi) in vel.data_mut().iter_mut().zip(phi.data_mut()).zip(g.data()) {
        let nv = mu * *v + gi + omega * *p;
        *v = nv;
        *p -= eta * nv;
    }
    Ok(OptState {
        phi,
        vel,
        step_index: s.step_index + 1,
    })
}

/// Adjoint of one step with the gradient treated as an external input.
///
/// Returns the pulled-back adjoint of `(φ, v)` through the linear part of the
/// step, and the adjoint reaching `g` (which is `λ^v − η λ^φ`).
pub fn transport(lam: &LagrangianState, hp: &HyperParams) -> (LagrangianState, Tensor) {
    let HyperParams { eta, mu, omega } = *hp;
    let lam_phi = lam
        .lam_phi
        .zip_map(&lam.lam_vel, |lp, lv| (1.0 - eta * omega) * lp + omega * lv);
    let lam_vel = lam
        .lam_phi
        .zip_map(&lam.lam_vel, |lp, lv| -eta * mu * lp + mu * lv);
    let prev = LagrangianState {
        lam_phi,
        lam_vel,
        step_index: lam.step_index.saturating_sub(1),
    };
    (prev, lam.gradient_direction(hp))
}

fn check_lagrangian(lam: &LagrangianState) -> Result<()> {
    if lam.lam_phi.len() != lam.lam_vel.len() {
        return Err(Error::DimensionMismatch {
            expected: lam.lam_phi.len(),
            got: lam.lam_vel.len(),
        });
    }
    Ok(())
}

/// Full adjoint of one step where `g = ∇_φ L_t(φ_t)`:
///
/// ```text
/// λ^φ_prev = (1 − ηω) λ^φ + ω λ^v + H (λ^v − η λ^φ)
/// λ^v_prev = −ημ λ^φ + μ λ^v
/// ```
///
/// `hvp_at_anchor` is called exactly once. `H` is symmetric, so `Hᵀu = Hu`.
pub fn adjoint_step(
    lam: &LagrangianState,
    hp: &HyperParams,
    hvp_at_anchor: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<LagrangianState> {
    check_lagrangian(lam)?;
    let (mut prev, dir) = transport(lam, hp);
    let hv = hvp_at_anchor(&dir)?;
    prev.lam_phi.axpy(1.0, &hv)?;
    Ok(prev)
}

/// θ-contribution `Λᵀ [−η; 1] ∂g/∂θ` of one step; one cross-product call.
pub fn theta_term(
    lam: &LagrangianState,
    hp: &HyperParams,
    cross_vp_at_anchor: impl FnOnce(&Tensor) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    check_lagrangian(lam)?;
    cross_vp_at_anchor(&lam.gradient_direction(hp))
}

/// Adjoint of a window of `len` steps that all reuse the gradient taken at
/// the window's first state.
///
/// Only the anchor gradient depends on `φ` (and `θ`), so the window is
/// `len` linear pull-backs whose gradient directions are summed into a single
/// vector `u`; `second_order(u)` is then called once and must return
/// `(H u, uᵀ ∂g/∂θ)` at the anchor. With `len == 1` this is exactly
/// [`adjoint_step`] plus [`theta_term`].
pub fn window_adjoint(
    lam: &LagrangianState,
    hp: &HyperParams,
    len: usize,
    second_order: impl FnOnce(&Tensor) -> Result<(Tensor, Vec<f64>)>,
) -> Result<(LagrangianState, Vec<f64>)> {
    check_lagrangian(lam)?;
    assert!(len >= 1, "window length must be positive");
    let mut cur = lam.clone();
    let mut dir = Tensor::zeros(lam.lam_phi.shape());
    for _ in 0..len {
        let (prev, d) = transport(&cur, hp);
        dir.axpy(1.0, &d)?;
        cur = prev;
    }
    let (hv, cross) = second_order(&dir)?;
    cur.lam_phi.axpy(1.0, &hv)?;
    Ok((cur, cross))
}
