use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `T` inner steps into non-overlapping windows of length `n`.
///
/// Anchors are 1-based step indices `1, n+1, 2n+1, …`. When `n ∤ T` the last
/// window is truncated to `T mod n` steps. `T = 0` is allowed and has no
/// windows (the trajectory is just `s_1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    total_steps: usize,
    window: usize,
    anchors: Vec<usize>,
}

impl WindowSchedule {
    pub fn new(total_steps: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidSchedule("window must be >= 1".into()));
        }
        let anchors = (0..total_steps).step_by(window).map(|t| t + 1).collect();
        Ok(Self {
            total_steps,
            window,
            anchors,
        })
    }

    /// Every step is an anchor.
    pub fn exact(total_steps: usize) -> Self {
        Self::new(total_steps, 1).expect("window 1 is valid")
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn num_windows(&self) -> usize {
        self.anchors.len()
    }

    /// `(anchor, length)` for each window in order.
    pub fn windows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.anchors.iter().map(move |&a| {
            let len = self.window.min(self.total_steps + 1 - a);
            (a, len)
        })
    }

    /// Anchor of the window containing step `t` (1-based).
    pub fn anchor_of(&self, t: usize) -> Option<usize> {
        if t == 0 || t > self.total_steps {
            return None;
        }
        Some(((t - 1) / self.window) * self.window + 1)
    }
}
