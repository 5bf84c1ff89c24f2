//! Seeded evaluation suites, metrics and per-episode records.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::agent::{ActMode, AgentNetworks};
use crate::config::write_atomic;
use crate::error::{Error, Result};
use crate::sim::trace::{Trace, TraceRecord};
use crate::sim::{env_step, make_scenario, orca_robot_action, reset, EnvConfig, EnvState, Scenario, StepEvent};

/// Anything that can drive the robot.
pub trait NavPolicy {
    fn name(&self) -> String;

    /// Called before each episode with its case seed.
    fn begin_episode(&mut self, _case_seed: u64) {}

    fn decide(&mut self, state: &EnvState, env: &EnvConfig) -> Result<PolicyStep>;
}

/// One decision plus whatever the policy can report about it.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: Action,
    pub attention: Option<Array2<f64>>,
    pub candidates: Vec<Action>,
    pub selected: Option<usize>,
}

/// The robot runs ORCA against the humans.
#[derive(Clone, Copy, Debug, Default)]
pub struct OrcaPolicy;

impl NavPolicy for OrcaPolicy {
    fn name(&self) -> String {
        "ORCA".into()
    }

    fn decide(&mut self, state: &EnvState, env: &EnvConfig) -> Result<PolicyStep> {
        Ok(PolicyStep {
            action: orca_robot_action(state, env),
            attention: None,
            candidates: Vec::new(),
            selected: None,
        })
    }
}

/// The learned planner; its sampling RNG is reseeded from each case seed.
pub struct ModelPolicy<'a> {
    pub nets: &'a AgentNetworks,
    pub m: usize,
    pub mode: ActMode,
    rng: ChaCha8Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(nets: &'a AgentNetworks, m: usize, mode: ActMode) -> Self {
        Self {
            nets,
            m,
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl NavPolicy for ModelPolicy<'_> {
    fn name(&self) -> String {
        "Model".into()
    }

    fn begin_episode(&mut self, case_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(case_seed);
        self.rng.set_stream(1);
    }

    fn decide(&mut self, state: &EnvState, _env: &EnvConfig) -> Result<PolicyStep> {
        let d = self.nets.act(state, self.mode, self.m, &mut self.rng)?;
        Ok(PolicyStep {
            action: d.action,
            attention: Some(d.attention),
            candidates: d.candidates,
            selected: Some(d.selected),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub outcome: Outcome,
    /// Elapsed simulated time when the episode ended (s).
    pub time: f64,
    pub total_reward: f64,
    pub trace: Trace,
    /// Attention matrix of each decision, when the policy reports one.
    pub attention: Vec<Array2<f64>>,
    pub candidates: Vec<Vec<Action>>,
    pub selected: Vec<usize>,
}

/// Rolls out one seeded case. Zero humans gives a robot-only scene.
pub fn run_episode(
    policy: &mut dyn NavPolicy,
    case_seed: u64,
    n_humans: usize,
    env: &EnvConfig,
) -> Result<EpisodeResult> {
    let scenario = if n_humans == 0 {
        Scenario::empty(case_seed, &env.scenario_params())
    } else {
        make_scenario(n_humans, case_seed, &env.scenario_params())?
    };
    let mut state = reset(&scenario, env);
    policy.begin_episode(case_seed);
    let mut trace = Trace {
        seed: case_seed,
        time_step: env.time_step,
        robot_goal: scenario.robot_goal,
        human_goals: scenario.human_goals.clone(),
        records: vec![TraceRecord::from_state(&state, None, 0.0)],
    };
    let mut attention = Vec::new();
    let mut candidates = Vec::new();
    let mut selected = Vec::new();
    let mut total = 0.0;
    let mut event = StepEvent::Moving;
    while !state.done {
        let step = policy.decide(&state, env)?;
        let out = env_step(&state, step.action, env)?;
        if let Some(a) = step.attention {
            attention.push(a);
        }
        if let Some(s) = step.selected {
            candidates.push(step.candidates);
            selected.push(s);
        }
        total += out.reward;
        event = out.event;
        trace
            .records
            .push(TraceRecord::from_state(&out.state, Some(out.event), out.reward));
        state = out.state;
    }
    let outcome = match event {
        StepEvent::ReachedGoal => Outcome::Success,
        StepEvent::Collision => Outcome::Collision,
        _ => Outcome::Timeout,
    };
    Ok(EpisodeResult {
        seed: case_seed,
        outcome,
        time: state.t,
        total_reward: total,
        trace,
        attention,
        candidates,
        selected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean navigation time of successful episodes; `None` without successes.
    pub avg_time: Option<f64>,
}

impl Metrics {
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
        let (s, c, t) = (
            count(Outcome::Success),
            count(Outcome::Collision),
            count(Outcome::Timeout),
        );
        let n = results.len();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let times: Vec<f64> = results
            .iter()
            .filter(|r| r.outcome == Outcome::Success)
            .map(|r| r.time)
            .collect();
        let (success_rate, collision_rate) = (rate(s), rate(c));
        // The remainder keeps `(success + collision) + timeout == 1.0` exact in f64.
        let timeout_rate = if n == 0 {
            0.0
        } else {
            1.0 - (success_rate + collision_rate)
        };
        Self {
            episodes: n,
            successes: s,
            collisions: c,
            timeouts: t,
            success_rate,
            collision_rate,
            timeout_rate,
            avg_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        }
    }
}

pub struct SuiteReport {
    pub policy: String,
    pub metrics: Metrics,
    pub results: Vec<EpisodeResult>,
}

/// Runs case seeds `base_seed .. base_seed + n_cases`.
pub fn evaluate_suite(
    policy: &mut dyn NavPolicy,
    n_cases: usize,
    n_humans: usize,
    base_seed: u64,
    env: &EnvConfig,
) -> Result<SuiteReport> {
    if n_cases == 0 {
        return Err(Error::InvalidParameter(
            "an evaluation suite needs at least one case".into(),
        ));
    }
    let results = (0..n_cases as u64)
        .map(|k| run_episode(policy, base_seed + k, n_humans, env))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        policy: policy.name(),
        metrics: Metrics::from_results(&results),
        results,
    })
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["Methods", "success(%)", "collision(%)", "timeout(%)", "time(s)"];

/// Plain-text table with one row per method.
pub fn summary_table(rows: &[(String, Metrics)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>11} {:>13} {:>11} {:>8}",
        SUMMARY_COLUMNS[0], SUMMARY_COLUMNS[1], SUMMARY_COLUMNS[2], SUMMARY_COLUMNS[3], SUMMARY_COLUMNS[4]
    );
    for (name, m) in rows {
        let time = m.avg_time.map_or("-".to_string(), |t| format!("{t:.2}"));
        let _ = writeln!(
            out,
            "{:<12} {:>11.1} {:>13.1} {:>11.1} {:>8}",
            name,
            100.0 * m.success_rate,
            100.0 * m.collision_rate,
            100.0 * m.timeout_rate,
            time
        );
    }
    out
}

/// `seed,outcome,time,reward` per episode.
pub fn episodes_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from("seed,outcome,time,reward\n");
    for r in results {
        let _ = writeln!(out, "{},{},{},{}", r.seed, r.outcome.label(), r.time, r.total_reward);
    }
    out
}

/// Writes `episodes.csv` and `summary.txt` into `dir`.
pub fn write_report(report: &SuiteReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("episodes.csv"), episodes_csv(&report.results).as_bytes())?;
    let table = summary_table(&[(report.policy.clone(), report.metrics.clone())]);
    write_atomic(&dir.join("summary.txt"), table.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_crowd_orca_succeeds() {
        let r = run_episode(&mut OrcaPolicy, 0, 0, &EnvConfig::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Success);
        assert!(r.time <= 25.0);
        assert!(r.attention.is_empty());
    }

    #[test]
    fn summary_column_order() {
        let m = Metrics::from_results(&[]);
        let t = summary_table(&[("ORCA".into(), m)]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, SUMMARY_COLUMNS);
    }
}
