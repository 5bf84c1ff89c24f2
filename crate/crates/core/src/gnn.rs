//! Single self-attention graph layer over agent features and the robot embedding.

use ndarray::{Array1, Array2};

use crate::geometry::Vec2;
use crate::history::AGENT_FEATURE_WIDTH;
use crate::nn::{Block, Linear, ParamStore, Tape, Var};

pub const ROBOT_FEATURE_WIDTH: usize = AGENT_FEATURE_WIDTH + 3;

/// Query/key/value projections (128 -> 128, no bias).
#[derive(Clone, Debug)]
pub struct InteractionGnn {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl InteractionGnn {
    pub fn new(store: &mut ParamStore, prefix: &str) -> Self {
        let w = AGENT_FEATURE_WIDTH;
        Self {
            query: Linear::new(store, &format!("{prefix}.query"), w, w, false),
            key: Linear::new(store, &format!("{prefix}.key"), w, w, false),
            value: Linear::new(store, &format!("{prefix}.value"), w, w, false),
        }
    }

    /// `ReLU(softmax(Q K^T / sqrt(d)) V)` inside each block (one block per
    /// scene, robot row first). Returns the output and the attention node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, blocks: &[Block]) -> (Var, Var) {
        let q = self.query.forward(tape, store, nodes);
        let k = self.key.forward(tape, store, nodes);
        let v = self.value.forward(tape, store, nodes);
        let attended = tape.block_attention(q, k, v, blocks);
        (tape.relu(attended), attended)
    }
}

/// Row-stochastic attention (adjacency) matrix for one scene.
pub fn attention_weights(gnn: &InteractionGnn, store: &ParamStore, nodes: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(nodes.clone());
    let blocks = [Block {
        start: 0,
        len: nodes.nrows(),
    }];
    let (_, att) = gnn.forward(&mut tape, store, x, &blocks);
    tape.attention_weights(att).expect("attention node")[0].clone()
}

/// Output node features of the graph layer for one scene.
pub fn gnn_layer(gnn: &InteractionGnn, store: &ParamStore, nodes: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(nodes.clone());
    let blocks = [Block {
        start: 0,
        len: nodes.nrows(),
    }];
    let (out, _) = gnn.forward(&mut tape, store, x, &blocks);
    tape.value(out).clone()
}

/// `[robot row of the graph output, goal (robot frame), v_pref]`.
pub fn robot_feature(nodes_out: &Array2<f64>, goal: Vec2, v_pref: f64) -> Array1<f64> {
    let mut f = Array1::zeros(ROBOT_FEATURE_WIDTH);
    f.slice_mut(ndarray::s![..AGENT_FEATURE_WIDTH])
        .assign(&nodes_out.row(0));
    f[AGENT_FEATURE_WIDTH] = goal.x;
    f[AGENT_FEATURE_WIDTH + 1] = goal.y;
    f[AGENT_FEATURE_WIDTH + 2] = v_pref;
    f
}
