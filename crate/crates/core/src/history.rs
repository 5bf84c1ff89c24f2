//! Trajectory vectorization and the subgraph history encoder.
//!
//! Each agent's last three motion segments become 7-wide vectors
//! `[p_prev, v, r, p_cur]`. Three subgraph layers (shared across agents)
//! encode every vector, max-pool across the segments and concatenate the
//! pooled copy back onto each row; a final max-pool yields one 128-wide
//! feature per agent.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::nn::{LayerNorm, Linear, ParamStore, Tape, Var, LAYER_NORM_EPS};

pub const HISTORY_LEN: usize = 3;
pub const HISTORY_WIDTH: usize = 7;
pub const SUBGRAPH_HIDDEN: usize = 64;
pub const AGENT_FEATURE_WIDTH: usize = 2 * SUBGRAPH_HIDDEN;
pub const SUBGRAPH_LAYERS: usize = 3;

/// One vectorized trajectory segment of an agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryVector {
    pub p_prev: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
    pub p_cur: Vec2,
}

impl HistoryVector {
    pub fn new(p_prev: Vec2, velocity: Vec2, radius: f64, p_cur: Vec2) -> Self {
        Self {
            p_prev,
            velocity,
            radius,
            p_cur,
        }
    }

    /// Components in encoder order.
    pub fn to_array(&self) -> [f64; HISTORY_WIDTH] {
        [
            self.p_prev.x,
            self.p_prev.y,
            self.velocity.x,
            self.velocity.y,
            self.radius,
            self.p_cur.x,
            self.p_cur.y,
        ]
    }

    /// Translates both endpoints by `-origin`.
    pub fn relative_to(&self, origin: Vec2) -> Self {
        Self {
            p_prev: self.p_prev - origin,
            velocity: self.velocity,
            radius: self.radius,
            p_cur: self.p_cur - origin,
        }
    }
}

/// Builds the history vector for one step of motion.
pub fn vectorize_step(prev_pos: Vec2, cur_pos: Vec2, velocity: Vec2, radius: f64) -> HistoryVector {
    HistoryVector::new(prev_pos, velocity, radius, cur_pos)
}

/// The last three segments of one agent, oldest first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySet(pub [HistoryVector; HISTORY_LEN]);

impl HistorySet {
    /// Window for an agent that has not moved yet.
    pub fn stationary(position: Vec2, radius: f64) -> Self {
        HistorySet([HistoryVector::new(position, Vec2::ZERO, radius, position); HISTORY_LEN])
    }

    /// Appends the newest segment, dropping the oldest.
    pub fn push(&mut self, v: HistoryVector) {
        self.0.rotate_left(1);
        self.0[HISTORY_LEN - 1] = v;
    }

    pub fn latest(&self) -> &HistoryVector {
        &self.0[HISTORY_LEN - 1]
    }

    /// True when each segment starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        self.0.windows(2).all(|w| w[0].p_cur == w[1].p_prev)
    }

    pub fn relative_to(&self, origin: Vec2) -> Self {
        HistorySet(self.0.map(|v| v.relative_to(origin)))
    }
}

/// One subgraph layer: linear -> layer norm -> ReLU, then max-pool + concat.
#[derive(Clone, Debug)]
pub struct SubgraphLayer {
    pub linear: Linear,
    pub norm: LayerNorm,
}

impl SubgraphLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize) -> Self {
        Self {
            linear: Linear::new(store, &format!("{prefix}.linear"), d_in, SUBGRAPH_HIDDEN, true),
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), SUBGRAPH_HIDDEN),
        }
    }

    /// `x` stacks groups of `HISTORY_LEN` rows, one group per agent.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.linear.weight);
        let b = tape.param(store, self.linear.bias.expect("subgraph linear has a bias"));
        let gain = tape.param(store, self.norm.gain);
        let beta = tape.param(store, self.norm.bias);
        tape.subgraph_block(x, w, b, gain, beta, LAYER_NORM_EPS, HISTORY_LEN)
    }
}

/// The shared three-layer subgraph network.
#[derive(Clone, Debug)]
pub struct SubgraphEncoder {
    pub layers: Vec<SubgraphLayer>,
}

impl SubgraphEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str) -> Self {
        let layers = (0..SUBGRAPH_LAYERS)
            .map(|i| {
                let d_in = if i == 0 { HISTORY_WIDTH } else { AGENT_FEATURE_WIDTH };
                SubgraphLayer::new(store, &format!("{prefix}.layer{i}"), d_in)
            })
            .collect();
        Self { layers }
    }

    /// Encodes stacked history rows (`3 * n_agents` x 7) into `n_agents` x 128.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, rows: Var) -> Var {
        let mut x = rows;
        for layer in &self.layers {
            x = layer.forward(tape, store, x);
        }
        tape.group_max(x, HISTORY_LEN)
    }

    /// Agent features for a list of history windows, one row per agent.
    pub fn encode_agents(&self, store: &ParamStore, histories: &[HistorySet]) -> Array2<f64> {
        let mut tape = Tape::new();
        let rows = tape.constant(history_rows(histories));
        let out = self.forward(&mut tape, store, rows);
        tape.value(out).clone()
    }
}

/// Stacks history windows into a `(3 * n) x 7` matrix, oldest segment first.
pub fn history_rows(histories: &[HistorySet]) -> Array2<f64> {
    let mut m = Array2::zeros((histories.len() * HISTORY_LEN, HISTORY_WIDTH));
    for (i, set) in histories.iter().enumerate() {
        for (k, v) in set.0.iter().enumerate() {
            for (c, x) in v.to_array().into_iter().enumerate() {
                m[[i * HISTORY_LEN + k, c]] = x;
            }
        }
    }
    m
}

/// Runs one subgraph layer on a single agent's `3 x d_in` matrix.
pub fn subgraph_layer(layer: &SubgraphLayer, store: &ParamStore, features: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let y = layer.forward(&mut tape, store, x);
    tape.value(y).clone()
}
