//! Minimal 2-D vector type used by the simulator and the ORCA solver.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// 2-D cross product (z component of the 3-D cross product).
    pub fn det(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            Vec2::ZERO
        }
    }

    /// Rotates by +90 degrees.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self * rhs.x, self * rhs.y)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x / rhs, self.y / rhs)
    }
}

/// Minimum distance between two points moving linearly over the same interval.
///
/// Both segments are parameterized by `s` in `[0, 1]`; the squared relative
/// distance is a quadratic in `s` whose minimizer is clamped to the interval.
pub fn interval_min_distance(a_start: Vec2, a_end: Vec2, b_start: Vec2, b_end: Vec2) -> f64 {
    let d0 = b_start - a_start;
    let dd = (b_end - b_start) - (a_end - a_start);
    let denom = dd.norm_sq();
    let s = if denom > 0.0 {
        (-d0.dot(dd) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (d0 + dd * s).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_points() {
        let d = interval_min_distance(Vec2::ZERO, Vec2::ZERO, Vec2::new(3.0, 4.0), Vec2::new(3.0, 4.0));
        assert_eq!(d, 5.0);
    }

    #[test]
    fn swapping_agents_meet_halfway() {
        let d = interval_min_distance(Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0), Vec2::ZERO);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn parallel_motion_keeps_distance() {
        let d = interval_min_distance(
            Vec2::ZERO,
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 2.0),
            Vec2::new(1.0, 2.0),
        );
        assert_eq!(d, 2.0);
    }

    #[test]
    fn perp_and_det() {
        let a = Vec2::new(1.0, 0.0);
        assert_eq!(a.perp(), Vec2::new(0.0, 1.0));
        assert_eq!(a.det(a.perp()), 1.0);
    }
}
