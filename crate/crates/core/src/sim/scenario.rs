//! Circle-crossing scenario generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub circle_radius: f64,
    /// Per-coordinate perturbation half-width.
    pub perturbation: f64,
    pub agent_radius: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            circle_radius: 4.0,
            perturbation: 0.5,
            agent_radius: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub robot_start: Vec2,
    pub robot_goal: Vec2,
    pub human_starts: Vec<Vec2>,
    pub human_goals: Vec<Vec2>,
    pub n_humans: usize,
    pub seed: u64,
}

impl Scenario {
    /// Robot-only scene on the same circle.
    pub fn empty(seed: u64, params: &ScenarioParams) -> Self {
        Self {
            robot_start: Vec2::new(0.0, -params.circle_radius),
            robot_goal: Vec2::new(0.0, params.circle_radius),
            human_starts: Vec::new(),
            human_goals: Vec::new(),
            n_humans: 0,
            seed,
        }
    }
}

/// Places `n_humans` on the crossing circle with antipodal goals.
///
/// The robot starts at the bottom of the circle and heads to the top. Each
/// human angle is uniform, each coordinate gets an independent uniform
/// perturbation, and the goal is the point reflection of the perturbed start
/// through the circle center. A candidate start is rejected when it lies
/// within two agent radii of any existing start or goal.
pub fn make_scenario(n_humans: usize, seed: u64, params: &ScenarioParams) -> Result<Scenario> {
    if n_humans == 0 {
        return Err(Error::Scenario("n_humans must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let robot_start = Vec2::new(0.0, -params.circle_radius);
    let robot_goal = Vec2::new(0.0, params.circle_radius);
    let min_sep = 2.0 * params.agent_radius;

    let mut starts: Vec<Vec2> = Vec::with_capacity(n_humans);
    let mut goals: Vec<Vec2> = Vec::with_capacity(n_humans);
    for i in 0..n_humans {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let nx = (rng.random::<f64>() - 0.5) * 2.0 * params.perturbation;
            let ny = (rng.random::<f64>() - 0.5) * 2.0 * params.perturbation;
            let start = Vec2::new(
                params.circle_radius * angle.cos() + nx,
                params.circle_radius * angle.sin() + ny,
            );
            let goal = -start;
            let clear = std::iter::once(robot_start)
                .chain(std::iter::once(robot_goal))
                .chain(starts.iter().copied())
                .chain(goals.iter().copied())
                .all(|p| p.distance(start) > min_sep && p.distance(goal) > min_sep);
            if clear {
                starts.push(start);
                goals.push(goal);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Scenario(format!(
                "could not place human {i} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }

    Ok(Scenario {
        robot_start,
        robot_goal,
        human_starts: starts,
        human_goals: goals,
        n_humans,
        seed,
    })
}
