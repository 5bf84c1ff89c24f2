//! Step reward and event classification.

use serde::{Deserialize, Serialize};

use crate::geometry::{interval_min_distance, Vec2};
use crate::sim::{AgentState, StepEvent};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub success_reward: f64,
    pub collision_penalty: f64,
    /// Width of the discomfort zone beyond contact (m).
    pub discomfort_dist: f64,
    pub progress_gain: f64,
    /// Goal counts as reached when the robot center is strictly closer than this.
    pub goal_tolerance: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            success_reward: 2.0,
            collision_penalty: -0.4,
            discomfort_dist: 0.2,
            progress_gain: 1.6,
            goal_tolerance: 0.3,
        }
    }
}

/// Closest human over the step interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestApproach {
    pub human: usize,
    /// Center-to-center distance.
    pub distance: f64,
    /// Sum of the two radii.
    pub contact: f64,
}

impl ClosestApproach {
    pub fn gap(&self) -> f64 {
        self.distance - self.contact
    }
}

/// Human with the smallest surface gap over the interval, assuming linear motion.
pub fn closest_approach(
    robot_from: Vec2,
    robot_to: Vec2,
    robot_radius: f64,
    humans_from: &[AgentState],
    humans_to: &[Vec2],
) -> Option<ClosestApproach> {
    humans_from
        .iter()
        .zip(humans_to)
        .enumerate()
        .map(|(i, (h, to))| ClosestApproach {
            human: i,
            distance: interval_min_distance(robot_from, robot_to, h.position, *to),
            contact: robot_radius + h.radius,
        })
        .min_by(|a, b| a.gap().total_cmp(&b.gap()))
}

/// Reward for the transition `robot_from -> robot_to`, with branches tested in
/// order: goal, collision, discomfort, progress.
///
/// The discomfort value is `(d_min - R) - discomfort_dist`, which lies in
/// `[-discomfort_dist, 0)` inside the zone.
pub fn step_reward(
    robot_from: Vec2,
    robot_to: Vec2,
    goal: Vec2,
    closest: Option<ClosestApproach>,
    params: &RewardParams,
) -> (f64, StepEvent) {
    if robot_to.distance(goal) < params.goal_tolerance {
        return (params.success_reward, StepEvent::ReachedGoal);
    }
    if let Some(c) = closest {
        if c.distance < c.contact {
            return (params.collision_penalty, StepEvent::Collision);
        }
        if c.distance < c.contact + params.discomfort_dist {
            return (c.gap() - params.discomfort_dist, StepEvent::Discomfort(c.distance));
        }
    }
    let progress = robot_from.distance(goal) - robot_to.distance(goal);
    (params.progress_gain * progress, StepEvent::Moving)
}
