//! Deterministic circle-crossing crowd simulation.

pub mod env;
pub mod orca;
pub mod reward;
pub mod scenario;
mod state;
pub mod trace;

pub use env::{
    apply_action, compute_reward, env_step, human_velocities, orca_robot_action, reset, reset_seeded, EnvConfig,
    StepOutcome,
};
pub use orca::{orca_velocity, OrcaParams, OrcaSolution};
pub use reward::RewardParams;
pub use scenario::{make_scenario, Scenario, ScenarioParams};
pub use state::{AgentState, EnvState, Human, RobotState, StepEvent};
