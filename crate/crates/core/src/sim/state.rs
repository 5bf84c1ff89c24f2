use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::history::HistorySet;

/// Kinematic state visible to every other agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

impl AgentState {
    pub const fn new(position: Vec2, velocity: Vec2, radius: f64) -> Self {
        Self {
            position,
            velocity,
            radius,
        }
    }
}

/// Robot state: the observable part plus the goal and preferred speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub agent: AgentState,
    pub goal: Vec2,
    pub v_pref: f64,
}

impl RobotState {
    pub fn position(&self) -> Vec2 {
        self.agent.position
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.agent.position.distance(self.goal)
    }
}

/// A human: observable state plus the goal its ORCA policy is driving toward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Human {
    pub agent: AgentState,
    pub goal: Vec2,
    pub v_pref: f64,
}

/// Outcome of a single environment step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepEvent {
    ReachedGoal,
    Collision,
    /// Closest approach (center to center) inside the discomfort zone.
    Discomfort(f64),
    Timeout,
    Moving,
}

impl StepEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, StepEvent::ReachedGoal | StepEvent::Collision | StepEvent::Timeout)
    }

    pub fn label(&self) -> &'static str {
        match self {
            StepEvent::ReachedGoal => "reached_goal",
            StepEvent::Collision => "collision",
            StepEvent::Discomfort(_) => "discomfort",
            StepEvent::Timeout => "timeout",
            StepEvent::Moving => "moving",
        }
    }
}

/// Joint simulation state.
///
/// `histories[0]` belongs to the robot, `histories[i + 1]` to `humans[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: f64,
    pub step_index: usize,
    pub robot: RobotState,
    pub humans: Vec<Human>,
    pub histories: Vec<HistorySet>,
    pub done: bool,
}

impl EnvState {
    pub fn human_states(&self) -> Vec<AgentState> {
        self.humans.iter().map(|h| h.agent).collect()
    }
}
