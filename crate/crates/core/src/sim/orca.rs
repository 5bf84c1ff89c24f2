//! Optimal reciprocal collision avoidance for a single agent.
//!
//! Half-plane construction and the incremental 2-D linear program (with the
//! 3-D fallback for infeasible constraint sets) follow the RVO2 reference
//! algorithm, without static obstacles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::sim::AgentState;

const LP_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrcaParams {
    /// Neighbors farther than this (center to center) are ignored.
    pub neighbor_dist: f64,
    pub time_horizon: f64,
    pub time_step: f64,
    pub max_speed: f64,
    /// Padding added to every radius when building constraints.
    pub safety_margin: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        Self {
            neighbor_dist: 10.0,
            time_horizon: 5.0,
            time_step: 0.25,
            max_speed: 1.0,
            safety_margin: 0.01,
        }
    }
}

impl OrcaParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("orca_neighbor_dist", self.neighbor_dist),
            ("orca_time_horizon", self.time_horizon),
            ("time_step", self.time_step),
            ("orca_max_speed", self.max_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.safety_margin >= 0.0 && self.safety_margin.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "orca_safety_margin must be >= 0, got {}",
                self.safety_margin
            )));
        }
        Ok(())
    }
}

/// A directed line; the permitted half-plane lies to its left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub direction: Vec2,
}

impl HalfPlane {
    /// Signed violation: positive when `v` lies on the forbidden (right) side.
    pub fn violation(&self, v: Vec2) -> f64 {
        self.direction.det(self.point - v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrcaSolution {
    pub velocity: Vec2,
    /// False when the 2-D program was infeasible and the 3-D fallback ran.
    pub feasible: bool,
}

/// Goal-directed preferred velocity, shortened on the final approach so the
/// agent stops on its goal instead of overshooting it.
pub fn preferred_velocity(position: Vec2, goal: Vec2, v_pref: f64, time_step: f64) -> Vec2 {
    let to_goal = goal - position;
    let dist = to_goal.norm();
    if dist == 0.0 {
        return Vec2::ZERO;
    }
    let speed = v_pref.min(dist / time_step);
    to_goal * (speed / dist)
}

/// Builds one ORCA half-plane per neighbor within `neighbor_dist`, nearest first.
pub fn orca_half_planes(agent: &AgentState, neighbors: &[AgentState], params: &OrcaParams) -> Vec<HalfPlane> {
    let inv_horizon = 1.0 / params.time_horizon;
    let mut near: Vec<(f64, usize)> = neighbors
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            let d2 = (n.position - agent.position).norm_sq();
            (d2 < params.neighbor_dist * params.neighbor_dist).then_some((d2, i))
        })
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    near.into_iter()
        .map(|(_, i)| {
            let other = &neighbors[i];
            let rel_pos = other.position - agent.position;
            let rel_vel = agent.velocity - other.velocity;
            let dist_sq = rel_pos.norm_sq();
            let combined_radius = agent.radius + other.radius + 2.0 * params.safety_margin;
            let combined_radius_sq = combined_radius * combined_radius;

            let (direction, u) = if dist_sq > combined_radius_sq {
                let w = rel_vel - rel_pos * inv_horizon;
                let w_len_sq = w.norm_sq();
                let dot1 = w.dot(rel_pos);
                if dot1 < 0.0 && dot1 * dot1 > combined_radius_sq * w_len_sq {
                    // Project on the cut-off circle.
                    let w_len = w_len_sq.sqrt();
                    let unit_w = w / w_len;
                    (
                        Vec2::new(unit_w.y, -unit_w.x),
                        unit_w * (combined_radius * inv_horizon - w_len),
                    )
                } else {
                    // Project on a leg of the truncated cone.
                    let leg = (dist_sq - combined_radius_sq).sqrt();
                    let direction = if rel_pos.det(w) > 0.0 {
                        Vec2::new(
                            rel_pos.x * leg - rel_pos.y * combined_radius,
                            rel_pos.x * combined_radius + rel_pos.y * leg,
                        ) / dist_sq
                    } else {
                        -Vec2::new(
                            rel_pos.x * leg + rel_pos.y * combined_radius,
                            -rel_pos.x * combined_radius + rel_pos.y * leg,
                        ) / dist_sq
                    };
                    let dot2 = rel_vel.dot(direction);
                    (direction, direction * dot2 - rel_vel)
                }
            } else {
                // Already overlapping: resolve within one time step.
                let inv_step = 1.0 / params.time_step;
                let w = rel_vel - rel_pos * inv_step;
                let w_len = w.norm();
                let unit_w = if w_len > 0.0 { w / w_len } else { Vec2::ZERO };
                (
                    Vec2::new(unit_w.y, -unit_w.x),
                    unit_w * (combined_radius * inv_step - w_len),
                )
            };
            HalfPlane {
                point: agent.velocity + u * 0.5,
                direction,
            }
        })
        .collect()
}

/// Velocity closest to `preferred` that satisfies every half-plane within the
/// speed disc; minimizes the maximum violation when no such velocity exists.
pub fn solve_half_planes(lines: &[HalfPlane], max_speed: f64, preferred: Vec2) -> OrcaSolution {
    let mut result = Vec2::ZERO;
    let fail = linear_program_2(lines, max_speed, preferred, false, &mut result);
    let feasible = fail == lines.len();
    if !feasible {
        linear_program_3(lines, fail, max_speed, &mut result);
    }
    OrcaSolution {
        velocity: result,
        feasible,
    }
}

/// New collision-avoiding velocity for `agent` heading to `goal`.
pub fn orca_velocity(
    agent: &AgentState,
    goal: Vec2,
    v_pref: f64,
    neighbors: &[AgentState],
    params: &OrcaParams,
) -> OrcaSolution {
    let preferred = preferred_velocity(agent.position, goal, v_pref, params.time_step);
    let lines = orca_half_planes(agent, neighbors, params);
    let mut sol = solve_half_planes(&lines, params.max_speed, preferred);
    // Rounding in the disc projection can leave the speed a few ulps above the cap.
    let speed = sol.velocity.norm();
    if speed > params.max_speed {
        sol.velocity = sol.velocity * (params.max_speed / speed);
    }
    sol
}

fn linear_program_1(
    lines: &[HalfPlane],
    line_no: usize,
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
    result: &mut Vec2,
) -> bool {
    let line = lines[line_no];
    let dot = line.point.dot(line.direction);
    let discriminant = dot * dot + radius * radius - line.point.norm_sq();
    if discriminant < 0.0 {
        // The speed disc misses this line entirely.
        return false;
    }
    let sqrt_disc = discriminant.sqrt();
    let mut t_left = -dot - sqrt_disc;
    let mut t_right = -dot + sqrt_disc;

    for other in &lines[..line_no] {
        let denominator = line.direction.det(other.direction);
        let numerator = other.direction.det(line.point - other.point);
        if denominator.abs() <= LP_EPSILON {
            // Parallel lines.
            if numerator < 0.0 {
                return false;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }

    *result = if direction_opt {
        if opt.dot(line.direction) > 0.0 {
            line.point + line.direction * t_right
        } else {
            line.point + line.direction * t_left
        }
    } else {
        let t = line.direction.dot(opt - line.point);
        line.point + line.direction * t.clamp(t_left, t_right)
    };
    true
}

fn linear_program_2(lines: &[HalfPlane], radius: f64, opt: Vec2, direction_opt: bool, result: &mut Vec2) -> usize {
    *result = if direction_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized() * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        if lines[i].violation(*result) > 0.0 {
            let previous = *result;
            if !linear_program_1(lines, i, radius, opt, direction_opt, result) {
                *result = previous;
                return i;
            }
        }
    }
    lines.len()
}

fn linear_program_3(lines: &[HalfPlane], begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if lines[i].violation(*result) <= distance {
            continue;
        }
        let mut projected = Vec::with_capacity(i);
        for j in 0..i {
            let determinant = lines[i].direction.det(lines[j].direction);
            let point = if determinant.abs() <= LP_EPSILON {
                if lines[i].direction.dot(lines[j].direction) > 0.0 {
                    continue;
                }
                (lines[i].point + lines[j].point) * 0.5
            } else {
                lines[i].point
                    + lines[i].direction * (lines[j].direction.det(lines[i].point - lines[j].point) / determinant)
            };
            projected.push(HalfPlane {
                point,
                direction: (lines[j].direction - lines[i].direction).normalized(),
            });
        }
        let previous = *result;
        let opt = Vec2::new(-lines[i].direction.y, lines[i].direction.x);
        if linear_program_2(&projected, radius, opt, true, result) < projected.len() {
            // Only reachable through floating-point error; keep the last result.
            *result = previous;
        }
        distance = lines[i].violation(*result);
    }
}

/// Validates that `agent` is not overlapping any neighbor.
pub fn check_no_overlap(agent: &AgentState, neighbors: &[AgentState]) -> Result<()> {
    for (i, n) in neighbors.iter().enumerate() {
        let d = agent.position.distance(n.position);
        if d < agent.radius + n.radius {
            return Err(Error::Contract(format!(
                "agent overlaps neighbor {i} (distance {d:.4} < {:.4})",
                agent.radius + n.radius
            )));
        }
    }
    Ok(())
}
