use serde::{Deserialize, Serialize};

use crate::ad::{grad, Objective};
use crate::error::{Error, Result};
use crate::metagrad::Trajectory;
use crate::tensor::ParamGroup;

/// Below this gradient norm the normalized difference is left undefined.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Per-step `‖∇L_t(φ_{t+1}) − ∇L_t(φ_t)‖ / ‖∇L_t(φ_{t+1})‖` for one inner loop.
///
/// `None` marks a step whose denominator fell under [`GRAD_NORM_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDiffSeries {
    pub outer_iter: usize,
    pub values: Vec<Option<f64>>,
}

impl GradDiffSeries {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.defined().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Median of the finite values, `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Evaluates `loss` at both ends of every step of a window-1 trajectory,
/// each on the batch that step used.
pub fn grad_diff_series(
    traj: &Trajectory,
    loss: &dyn Objective,
    theta: &ParamGroup,
    outer_iter: usize,
) -> Result<GradDiffSeries> {
    let mut values = Vec::with_capacity(traj.windows().len());
    for w in traj.windows() {
        if w.len != 1 {
            return Err(Error::InvalidSchedule(format!(
                "gradient differences need one step per window, window at {} has {}",
                w.anchor, w.len
            )));
        }
        let before = grad(loss, &traj.phi_at(w.anchor), theta, &w.batch)?;
        let after = grad(loss, &traj.phi_at(w.anchor + 1), theta, &w.batch)?;
        let denom = after.norm();
        values.push(if denom < GRAD_NORM_FLOOR {
            None
        } else {
            Some(after.sub(&before)?.norm() / denom)
        });
    }
    Ok(GradDiffSeries { outer_iter, values })
}
