use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

/// Tolerance on the displacement bound `|a| <= v_pref * dt`.
pub const ACTION_NORM_SLACK: f64 = 1e-9;

/// Planned displacement from the current position to the next position point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const ZERO: Action = Action { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn as_vec(&self) -> Vec2 {
        Vec2::new(self.dx, self.dy)
    }

    pub fn from_vec(v: Vec2) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn within(&self, max_step: f64) -> bool {
        self.norm() <= max_step + ACTION_NORM_SLACK
    }

    /// Shrinks the action onto the disc of radius `max_step` if it lies outside.
    pub fn clamped(self, max_step: f64) -> Action {
        let n = self.norm();
        if n > max_step {
            Action::new(self.dx * max_step / n, self.dy * max_step / n)
        } else {
            self
        }
    }
}
