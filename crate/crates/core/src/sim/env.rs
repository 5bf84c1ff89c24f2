//! Circle-crossing environment: reset, stepping, and the built-in ORCA robot policy.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::history::{HistorySet, HistoryVector};
use crate::sim::orca::{orca_velocity, OrcaParams, OrcaSolution};
use crate::sim::reward::{closest_approach, step_reward, ClosestApproach, RewardParams};
use crate::sim::scenario::{make_scenario, Scenario, ScenarioParams};
use crate::sim::{AgentState, EnvState, Human, RobotState, StepEvent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub time_step: f64,
    pub time_limit: f64,
    pub agent_radius: f64,
    pub robot_v_pref: f64,
    pub human_v_pref: f64,
    pub circle_radius: f64,
    pub perturbation: f64,
    pub orca_neighbor_dist: f64,
    pub orca_time_horizon: f64,
    pub orca_max_speed: f64,
    pub orca_safety_margin: f64,
    /// When set, humans treat the robot as an ORCA neighbor.
    pub robot_visible: bool,
    pub reward: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            time_step: 0.25,
            time_limit: 25.0,
            agent_radius: 0.3,
            robot_v_pref: 1.0,
            human_v_pref: 1.0,
            circle_radius: 4.0,
            perturbation: 0.5,
            orca_neighbor_dist: 10.0,
            orca_time_horizon: 5.0,
            orca_max_speed: 1.0,
            orca_safety_margin: 0.01,
            robot_visible: false,
            reward: RewardParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn orca_params(&self) -> OrcaParams {
        OrcaParams {
            neighbor_dist: self.orca_neighbor_dist,
            time_horizon: self.orca_time_horizon,
            time_step: self.time_step,
            max_speed: self.orca_max_speed,
            safety_margin: self.orca_safety_margin,
        }
    }

    pub fn scenario_params(&self) -> ScenarioParams {
        ScenarioParams {
            circle_radius: self.circle_radius,
            perturbation: self.perturbation,
            agent_radius: self.agent_radius,
        }
    }

    /// Longest displacement the robot may plan in one step.
    pub fn max_step(&self) -> f64 {
        self.robot_v_pref * self.time_step
    }

    pub fn max_steps(&self) -> usize {
        (self.time_limit / self.time_step).ceil() as usize
    }

    pub fn with_visible_robot(mut self, visible: bool) -> Self {
        self.robot_visible = visible;
        self
    }
}

/// Result of one `env_step`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub event: StepEvent,
    pub closest: Option<ClosestApproach>,
    /// False if any human's ORCA program needed the infeasible fallback.
    pub humans_feasible: bool,
}

/// Initial joint state for a scenario: agents at rest, histories padded with
/// zero-displacement segments at the start positions.
pub fn reset(scenario: &Scenario, cfg: &EnvConfig) -> EnvState {
    let r = cfg.agent_radius;
    let robot = RobotState {
        agent: AgentState::new(scenario.robot_start, Vec2::ZERO, r),
        goal: scenario.robot_goal,
        v_pref: cfg.robot_v_pref,
    };
    let humans: Vec<Human> = scenario
        .human_starts
        .iter()
        .zip(&scenario.human_goals)
        .map(|(&start, &goal)| Human {
            agent: AgentState::new(start, Vec2::ZERO, r),
            goal,
            v_pref: cfg.human_v_pref,
        })
        .collect();
    let histories = std::iter::once(&robot.agent)
        .chain(humans.iter().map(|h| &h.agent))
        .map(|a| HistorySet::stationary(a.position, a.radius))
        .collect();
    EnvState {
        t: 0.0,
        step_index: 0,
        robot,
        humans,
        histories,
        done: false,
    }
}

/// Convenience: generate the scenario for `(n_humans, seed)` and reset.
pub fn reset_seeded(n_humans: usize, seed: u64, cfg: &EnvConfig) -> Result<EnvState> {
    let scenario = make_scenario(n_humans, seed, &cfg.scenario_params())?;
    Ok(reset(&scenario, cfg))
}

/// Moves the robot along `action` with the linear tracking model `V = dP / dt`.
pub fn apply_action(robot: &RobotState, action: Action, time_step: f64) -> Result<RobotState> {
    let max_step = robot.v_pref * time_step;
    if !action.within(max_step) || !action.as_vec().is_finite() {
        return Err(Error::Contract(format!(
            "action length {:.6} exceeds v_pref * dt = {max_step:.6}",
            action.norm()
        )));
    }
    let mut next = *robot;
    next.agent.position = robot.agent.position + action.as_vec();
    next.agent.velocity = action.as_vec() / time_step;
    Ok(next)
}

/// ORCA velocities for every human. The robot is a neighbor only when visible.
pub fn human_velocities(state: &EnvState, cfg: &EnvConfig) -> Vec<OrcaSolution> {
    let params = cfg.orca_params();
    let agents = state.human_states();
    let mut neighbors: Vec<AgentState> = Vec::with_capacity(agents.len());
    state
        .humans
        .iter()
        .enumerate()
        .map(|(i, h)| {
            neighbors.clear();
            neighbors.extend(agents.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, a)| *a));
            if cfg.robot_visible {
                neighbors.push(state.robot.agent);
            }
            orca_velocity(&h.agent, h.goal, h.v_pref, &neighbors, &params)
        })
        .collect()
}

/// Reward and event for moving the robot by `action` while humans move to
/// `next_humans`, with the closest approach measured over the whole step.
pub fn compute_reward(
    state: &EnvState,
    action: Action,
    next_humans: &[Vec2],
    params: &RewardParams,
) -> (f64, StepEvent) {
    let from = state.robot.position();
    let to = from + action.as_vec();
    let closest = closest_approach(from, to, state.robot.agent.radius, &state.human_states(), next_humans);
    step_reward(from, to, state.robot.goal, closest, params)
}

pub fn env_step(state: &EnvState, action: Action, cfg: &EnvConfig) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::Usage("env_step called on a finished episode".into()));
    }
    let dt = cfg.time_step;
    let robot = apply_action(&state.robot, action, dt)?;

    let solutions = human_velocities(state, cfg);
    let humans_feasible = solutions.iter().all(|s| s.feasible);
    let humans: Vec<Human> = state
        .humans
        .iter()
        .zip(&solutions)
        .map(|(h, s)| {
            let mut next = *h;
            next.agent.velocity = s.velocity;
            next.agent.position = h.agent.position + s.velocity * dt;
            next
        })
        .collect();
    let next_positions: Vec<Vec2> = humans.iter().map(|h| h.agent.position).collect();

    let from = state.robot.position();
    let closest = closest_approach(
        from,
        robot.position(),
        robot.agent.radius,
        &state.human_states(),
        &next_positions,
    );
    let (reward, mut event) = step_reward(from, robot.position(), robot.goal, closest, &cfg.reward);

    let step_index = state.step_index + 1;
    let t = step_index as f64 * dt;
    if !event.is_terminal() && t >= cfg.time_limit {
        event = StepEvent::Timeout;
    }
    let done = event.is_terminal();

    let mut histories = state.histories.clone();
    histories[0].push(HistoryVector::new(
        from,
        robot.agent.velocity,
        robot.agent.radius,
        robot.position(),
    ));
    for (k, (old, new)) in state.humans.iter().zip(&humans).enumerate() {
        histories[k + 1].push(HistoryVector::new(
            old.agent.position,
            new.agent.velocity,
            new.agent.radius,
            new.agent.position,
        ));
    }

    Ok(StepOutcome {
        state: EnvState {
            t,
            step_index,
            robot,
            humans,
            histories,
            done,
        },
        reward,
        done,
        event,
        closest,
        humans_feasible,
    })
}

/// The robot's own ORCA action, treating every human as a neighbor.
pub fn orca_robot_action(state: &EnvState, cfg: &EnvConfig) -> Action {
    let mut params = cfg.orca_params();
    params.max_speed = state.robot.v_pref;
    let v = orca_velocity(
        &state.robot.agent,
        state.robot.goal,
        state.robot.v_pref,
        &state.human_states(),
        &params,
    )
    .velocity;
    Action::from_vec(v * cfg.time_step).clamped(state.robot.v_pref * cfg.time_step)
}
