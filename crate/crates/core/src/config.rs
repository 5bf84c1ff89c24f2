//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! missing keys keep their defaults. Unknown or repeated keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::NetworkDims;
use crate::error::{Error, Result};
use crate::sim::EnvConfig;
use crate::trainer::TrainConfig;

/// Name of the effective-config echo inside a run directory.
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub dims: NetworkDims,
    pub n_humans: usize,
    pub seed: u64,
    /// First case seed of evaluation suites.
    pub eval_base_seed: u64,
    pub eval_episodes: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            dims: NetworkDims::default(),
            n_humans: 5,
            seed: 0,
            eval_base_seed: 0,
            eval_episodes: 500,
            out_dir: "runs/default".into(),
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty => $what:literal),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got {s:?}", $what))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(f64 => "a number", usize => "a non-negative integer", u64 => "a non-negative integer", bool => "true or false");

impl Value for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn format_value(&self) -> String {
        self.clone()
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| format!("expected comma-separated widths, got {s:?}"))
            })
            .collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse_value(value).map_err(|message| Error::Config {
                            key: key.to_string(),
                            message,
                        })?;
                    })*
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            message: "unknown key".into(),
                        })
                    }
                }
                Ok(())
            }

            /// `(key, value)` pairs of every field.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.format_value())),*]
            }
        }
    };
}

keys! {
    "seed" => seed;
    "n_humans" => n_humans;
    "out_dir" => out_dir;
    "eval_base_seed" => eval_base_seed;
    "eval_episodes" => eval_episodes;
    "time_step" => env.time_step;
    "time_limit" => env.time_limit;
    "agent_radius" => env.agent_radius;
    "robot_v_pref" => env.robot_v_pref;
    "human_v_pref" => env.human_v_pref;
    "circle_radius" => env.circle_radius;
    "perturbation" => env.perturbation;
    "robot_visible" => env.robot_visible;
    "orca_neighbor_dist" => env.orca_neighbor_dist;
    "orca_time_horizon" => env.orca_time_horizon;
    "orca_max_speed" => env.orca_max_speed;
    "orca_safety_margin" => env.orca_safety_margin;
    "reward_success" => env.reward.success_reward;
    "reward_collision" => env.reward.collision_penalty;
    "discomfort_dist" => env.reward.discomfort_dist;
    "progress_gain" => env.reward.progress_gain;
    "goal_tolerance" => env.reward.goal_tolerance;
    "gamma" => train.gamma;
    "alpha" => train.alpha;
    "batch_size" => train.batch_size;
    "il_episodes" => train.il_episodes;
    "il_updates" => train.il_updates;
    "rl_episodes" => train.rl_episodes;
    "il_learning_rate" => train.il_learning_rate;
    "rl_learning_rate" => train.rl_learning_rate;
    "m" => train.m;
    "tau" => train.tau;
    "buffer_capacity" => train.buffer_capacity;
    "updates_per_step" => train.updates_per_step;
    "actor_updates_trunk" => train.actor_updates_trunk;
    "eval_every" => train.eval_every;
    "checkpoint_every" => train.checkpoint_every;
    "policy_hidden" => dims.policy_hidden;
    "critic_hidden" => dims.critic_hidden;
    "selection_hidden" => dims.selection_hidden;
}

fn invalid(key: &str, message: &str) -> Result<()> {
    Err(Error::Config {
        key: key.to_string(),
        message: message.to_string(),
    })
}

impl RunConfig {
    /// Checks every field against its invariant.
    pub fn validate(&self) -> Result<()> {
        if let Err((key, message)) = self.train.validate() {
            return invalid(key, &message);
        }
        let positive = [
            ("time_step", self.env.time_step),
            ("time_limit", self.env.time_limit),
            ("agent_radius", self.env.agent_radius),
            ("robot_v_pref", self.env.robot_v_pref),
            ("human_v_pref", self.env.human_v_pref),
            ("circle_radius", self.env.circle_radius),
            ("orca_neighbor_dist", self.env.orca_neighbor_dist),
            ("orca_time_horizon", self.env.orca_time_horizon),
            ("orca_max_speed", self.env.orca_max_speed),
            ("goal_tolerance", self.env.reward.goal_tolerance),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(key, "must be a positive finite number");
            }
        }
        let non_negative = [
            ("perturbation", self.env.perturbation),
            ("orca_safety_margin", self.env.orca_safety_margin),
            ("discomfort_dist", self.env.reward.discomfort_dist),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(key, "must be a non-negative finite number");
            }
        }
        for (key, v) in [
            ("reward_success", self.env.reward.success_reward),
            ("reward_collision", self.env.reward.collision_penalty),
            ("progress_gain", self.env.reward.progress_gain),
        ] {
            if !v.is_finite() {
                return invalid(key, "must be finite");
            }
        }
        if self.n_humans == 0 {
            return invalid("n_humans", "must be at least 1");
        }
        if self.eval_episodes == 0 {
            return invalid("eval_episodes", "must be at least 1");
        }
        if self.out_dir.is_empty() {
            return invalid("out_dir", "must not be empty");
        }
        for (key, w) in [
            ("policy_hidden", &self.dims.policy_hidden),
            ("critic_hidden", &self.dims.critic_hidden),
            ("selection_hidden", &self.dims.selection_hidden),
        ] {
            if w.is_empty() || w.contains(&0) {
                return invalid(key, "needs at least one positive width");
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.to_string(),
                    message: format!("line {}: expected key=value", n + 1),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return invalid(key, "given more than once").map(|_| cfg);
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` override (as given on a command line).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)?;
        self.validate()
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
