//! Line-oriented episode trace.
//!
//! ```text
//! # crowdnav-trace v1 seed=<u64> n_humans=<n> dt=<s>
//! t,step,event,reward,robot_px,robot_py,robot_vx,robot_vy,h0_px,h0_py,h0_vx,h0_vy,...
//! 0,0,start,0,0,-4,0,0,...
//! ```
//!
//! One record per line; the first data line is the initial state.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::sim::{EnvState, StepEvent};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub step: usize,
    /// `start` for the initial record, otherwise the step event label.
    pub event: String,
    pub reward: f64,
    pub robot: Pose,
    pub humans: Vec<Pose>,
}

impl TraceRecord {
    pub fn from_state(state: &EnvState, event: Option<StepEvent>, reward: f64) -> Self {
        Self {
            t: state.t,
            step: state.step_index,
            event: event.map_or("start", |e| e.label()).to_string(),
            reward,
            robot: Pose {
                position: state.robot.agent.position,
                velocity: state.robot.agent.velocity,
            },
            humans: state
                .humans
                .iter()
                .map(|h| Pose {
                    position: h.agent.position,
                    velocity: h.agent.velocity,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub time_step: f64,
    pub robot_goal: Vec2,
    pub human_goals: Vec<Vec2>,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn n_humans(&self) -> usize {
        self.human_goals.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.n_humans();
        let _ = write!(
            out,
            "# crowdnav-trace v1 seed={} n_humans={} dt={} goal={},{}",
            self.seed, n, self.time_step, self.robot_goal.x, self.robot_goal.y
        );
        for g in &self.human_goals {
            let _ = write!(out, " hgoal={},{}", g.x, g.y);
        }
        out.push('\n');
        out.push_str("t,step,event,reward,robot_px,robot_py,robot_vx,robot_vy");
        for i in 0..n {
            let _ = write!(out, ",h{i}_px,h{i}_py,h{i}_vx,h{i}_vy");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{}", r.t, r.step, r.event, r.reward);
            for p in std::iter::once(&r.robot).chain(&r.humans) {
                let _ = write!(
                    out,
                    ",{},{},{},{}",
                    p.position.x, p.position.y, p.velocity.x, p.velocity.y
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace> {
        let bad = |msg: String| Error::Usage(format!("malformed trace: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let header = header
            .strip_prefix("# crowdnav-trace v1 ")
            .ok_or_else(|| bad("missing header".into()))?;
        let mut seed = None;
        let mut dt = None;
        let mut n_humans = None;
        let mut goal = None;
        let mut human_goals = Vec::new();
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("header field {field}")))?;
            match k {
                "seed" => seed = v.parse::<u64>().ok(),
                "n_humans" => n_humans = v.parse::<usize>().ok(),
                "dt" => dt = v.parse::<f64>().ok(),
                "goal" => goal = parse_vec(v),
                "hgoal" => human_goals.push(parse_vec(v).ok_or_else(|| bad(format!("hgoal {v}")))?),
                _ => return Err(bad(format!("unknown header key {k}"))),
            }
        }
        let n = n_humans.ok_or_else(|| bad("n_humans".into()))?;
        if human_goals.len() != n {
            return Err(bad("human goal count".into()));
        }
        lines.next().ok_or_else(|| bad("missing column line".into()))?;
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 + 4 * n {
                return Err(bad(format!("line {}: expected {} columns", ln + 3, 8 + 4 * n)));
            }
            let num = |i: usize| -> Result<f64> {
                cols[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("line {}: column {i}", ln + 3)))
            };
            let pose = |i: usize| -> Result<Pose> {
                Ok(Pose {
                    position: Vec2::new(num(i)?, num(i + 1)?),
                    velocity: Vec2::new(num(i + 2)?, num(i + 3)?),
                })
            };
            records.push(TraceRecord {
                t: num(0)?,
                step: cols[1].parse().map_err(|_| bad(format!("line {}: step", ln + 3)))?,
                event: cols[2].to_string(),
                reward: num(3)?,
                robot: pose(4)?,
                humans: (0..n).map(|i| pose(8 + 4 * i)).collect::<Result<_>>()?,
            });
        }
        Ok(Trace {
            seed: seed.ok_or_else(|| bad("seed".into()))?,
            time_step: dt.ok_or_else(|| bad("dt".into()))?,
            robot_goal: goal.ok_or_else(|| bad("goal".into()))?,
            human_goals,
            records,
        })
    }
}

fn parse_vec(s: &str) -> Option<Vec2> {
    let (x, y) = s.split_once(',')?;
    Some(Vec2::new(x.parse().ok()?, y.parse().ok()?))
}
