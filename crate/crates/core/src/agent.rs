//! Stochastic policy, twin critics and the m-sample selection network.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::gnn::{InteractionGnn, ROBOT_FEATURE_WIDTH};
use crate::history::{history_rows, HistorySet, SubgraphEncoder, HISTORY_LEN};
use crate::nn::{Block, Mlp, ParamId, ParamStore, Tape, Var};
use crate::sim::EnvState;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const ACTION_DIM: usize = 2;
pub const CRITIC_INPUT_WIDTH: usize = ROBOT_FEATURE_WIDTH + ACTION_DIM;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Everything the networks see of a state, in the robot-centred frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Robot window first, then one window per human.
    pub histories: Vec<HistorySet>,
    /// Goal relative to the robot.
    pub goal: Vec2,
    pub v_pref: f64,
}

impl Observation {
    pub fn from_state(state: &EnvState) -> Self {
        let origin = state.robot.position();
        Self {
            histories: state.histories.iter().map(|h| h.relative_to(origin)).collect(),
            goal: state.robot.goal - origin,
            v_pref: state.robot.v_pref,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.histories.len()
    }
}

/// Hidden layer widths of the three heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub selection_hidden: Vec<usize>,
}

impl Default for NetworkDims {
    fn default() -> Self {
        Self {
            policy_hidden: vec![256; 3],
            critic_hidden: vec![256; 3],
            selection_hidden: vec![256; 2],
        }
    }
}

fn widths(d_in: usize, hidden: &[usize], d_out: usize) -> Vec<usize> {
    std::iter::once(d_in)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(d_out))
        .collect()
}

/// Pre-squash Gaussian over the two action components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub mean: [f64; 2],
    pub log_std: [f64; 2],
}

impl ActionDistribution {
    /// Squashed mean: the action taken when the noise is zero.
    pub fn mode(&self, max_step: f64) -> Action {
        squash(self.mean, max_step)
    }

    /// Log density of `max_step * tanh(u)` at pre-squash point `u`, ignoring the
    /// disc projection.
    pub fn squashed_log_prob(&self, u: [f64; 2], max_step: f64) -> f64 {
        (0..2)
            .map(|i| {
                let std = self.log_std[i].exp();
                let z = (u[i] - self.mean[i]) / std;
                -0.5 * z * z - self.log_std[i] - HALF_LN_2PI - max_step.ln() - (1.0 - u[i].tanh().powi(2)).ln()
            })
            .sum()
    }
}

/// `max_step * tanh(u)` per component, projected onto the disc of radius `max_step`.
pub fn squash(u: [f64; 2], max_step: f64) -> Action {
    Action::new(max_step * u[0].tanh(), max_step * u[1].tanh()).clamped(max_step)
}

/// `m` independent squashed samples.
pub fn sample_action_set<R: Rng>(dist: &ActionDistribution, m: usize, rng: &mut R, max_step: f64) -> Vec<Action> {
    (0..m)
        .map(|_| {
            let u = [0, 1].map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                dist.mean[i] + dist.log_std[i].exp() * eps
            });
            squash(u, max_step)
        })
        .collect()
}

/// Index of the first maximum.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if *v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QKind {
    /// Minimum of the two online critics.
    OnlineMin,
    /// Minimum of the two target critics.
    TargetMin,
    Selection,
    SelectionTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Output of one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub candidates: Vec<Action>,
    pub selected: usize,
    /// Attention matrix of the scene, robot row first.
    pub attention: Array2<f64>,
    pub feature: Array1<f64>,
}

/// Batched trunk output on a tape.
pub struct TrunkOutput {
    /// `batch x 131`.
    pub features: Var,
    pub attention: Var,
}

/// Tape nodes of a reparameterized policy sample.
pub struct PolicySample {
    /// Action divided by `max_step`, inside the unit disc.
    pub action: Var,
    /// `batch x 1` log density.
    pub log_prob: Var,
}

/// All trainable networks in one parameter store.
#[derive(Clone, Debug)]
pub struct AgentNetworks {
    pub store: ParamStore,
    pub dims: NetworkDims,
    pub subgraph: SubgraphEncoder,
    pub gnn: InteractionGnn,
    pub policy: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub selection: Mlp,
    pub selection_target: Mlp,
    pub max_step: f64,
}

impl AgentNetworks {
    pub fn new<R: Rng>(dims: NetworkDims, max_step: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let subgraph = SubgraphEncoder::new(&mut store, "subgraph");
        let gnn = InteractionGnn::new(&mut store, "gnn");
        let policy = Mlp::new(
            &mut store,
            "policy",
            &widths(ROBOT_FEATURE_WIDTH, &dims.policy_hidden, 4),
        );
        let critic_w = widths(CRITIC_INPUT_WIDTH, &dims.critic_hidden, 1);
        let select_w = widths(CRITIC_INPUT_WIDTH, &dims.selection_hidden, 1);
        let critic1 = Mlp::new(&mut store, "critic1", &critic_w);
        let critic2 = Mlp::new(&mut store, "critic2", &critic_w);
        let selection = Mlp::new(&mut store, "selection", &select_w);
        let critic1_target = Mlp::new(&mut store, "critic1_target", &critic_w);
        let critic2_target = Mlp::new(&mut store, "critic2_target", &critic_w);
        let selection_target = Mlp::new(&mut store, "selection_target", &select_w);
        store.init_default(rng);
        let mut nets = Self {
            store,
            dims,
            subgraph,
            gnn,
            policy,
            critic1,
            critic2,
            critic1_target,
            critic2_target,
            selection,
            selection_target,
            max_step,
        };
        nets.polyak_critics(1.0);
        nets.polyak_selection(1.0);
        nets
    }

    /// (online, target) parameter pairs of both critics.
    pub fn critic_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let a = self.critic1.params().into_iter().zip(self.critic1_target.params());
        let b = self.critic2.params().into_iter().zip(self.critic2_target.params());
        a.chain(b).collect()
    }

    pub fn selection_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.selection
            .params()
            .into_iter()
            .zip(self.selection_target.params())
            .collect()
    }

    /// `target <- (1 - tau) * target + tau * online` for both critics.
    pub fn polyak_critics(&mut self, tau: f64) {
        let pairs = self.critic_pairs();
        polyak(&mut self.store, &pairs, tau);
    }

    pub fn polyak_selection(&mut self, tau: f64) {
        let pairs = self.selection_pairs();
        polyak(&mut self.store, &pairs, tau);
    }

    /// Encoder, graph layer and robot-feature assembly for a batch of observations.
    pub fn trunk(&self, tape: &mut Tape, obs: &[&Observation]) -> TrunkOutput {
        let mut rows = Vec::with_capacity(obs.len());
        let mut blocks = Vec::with_capacity(obs.len());
        let mut robot_rows = Vec::with_capacity(obs.len());
        let mut extra = Array2::zeros((obs.len(), 3));
        let mut start = 0;
        for (b, o) in obs.iter().enumerate() {
            rows.push(history_rows(&o.histories));
            blocks.push(Block {
                start,
                len: o.n_agents(),
            });
            robot_rows.push(start);
            start += o.n_agents();
            extra[[b, 0]] = o.goal.x;
            extra[[b, 1]] = o.goal.y;
            extra[[b, 2]] = o.v_pref;
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).expect("history rows");
        debug_assert_eq!(stacked.nrows(), start * HISTORY_LEN);
        let x = tape.constant(stacked);
        let agents = self.subgraph.forward(tape, &self.store, x);
        let (out, attention) = self.gnn.forward(tape, &self.store, agents, &blocks);
        let robot = tape.select_rows(out, &robot_rows);
        let extra = tape.constant(extra);
        TrunkOutput {
            features: tape.concat_cols(&[robot, extra]),
            attention,
        }
    }

    /// Robot features for a batch, without gradient tracking.
    pub fn features(&self, obs: &[&Observation]) -> Array2<f64> {
        let mut tape = Tape::new();
        let t = self.trunk(&mut tape, obs);
        tape.value(t.features).clone()
    }

    /// Policy head: `(mean, clamped log_std)`, each `batch x 2`.
    pub fn policy_head(&self, tape: &mut Tape, features: Var) -> (Var, Var) {
        let out = self.policy.forward(tape, &self.store, features);
        let mean = tape.slice_cols(out, 0, 2);
        let raw = tape.slice_cols(out, 2, 2);
        (mean, tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX))
    }

    /// Reparameterized sample `disc(tanh(mean + std * eps))` with its log density.
    pub fn policy_sample(&self, tape: &mut Tape, mean: Var, log_std: Var, eps: Array2<f64>) -> PolicySample {
        let eps_v = tape.constant(eps.clone());
        let std = tape.exp(log_std);
        let noise = tape.mul(std, eps_v);
        let u = tape.add(mean, noise);
        let squashed = tape.tanh(u);
        let action = tape.disc_project(squashed, 1.0);
        // log N(eps) - log_std - ln(max_step) - ln(1 - tanh(u)^2), with
        // ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)).
        let gauss =
            tape.constant(eps.mapv(|e| -0.5 * e * e - HALF_LN_2PI - self.max_step.ln() - 2.0 * std::f64::consts::LN_2));
        let neg2u = tape.scale(u, -2.0);
        let sp = tape.softplus(neg2u);
        let corr = tape.add(u, sp);
        let corr = tape.scale(corr, 2.0);
        let terms = tape.sub(gauss, log_std);
        let terms = tape.add(terms, corr);
        PolicySample {
            action,
            log_prob: tape.row_sum(terms),
        }
    }

    /// Q estimate for features and normalized actions (`action / max_step`).
    pub fn q(&self, tape: &mut Tape, features: Var, action_norm: Var, which: QKind) -> Var {
        let input = tape.concat_cols(&[features, action_norm]);
        match which {
            QKind::OnlineMin => {
                let a = self.critic1.forward(tape, &self.store, input);
                let b = self.critic2.forward(tape, &self.store, input);
                tape.min_elem(a, b)
            }
            QKind::TargetMin => {
                let a = self.critic1_target.forward(tape, &self.store, input);
                let b = self.critic2_target.forward(tape, &self.store, input);
                tape.min_elem(a, b)
            }
            QKind::Selection => self.selection.forward(tape, &self.store, input),
            QKind::SelectionTarget => self.selection_target.forward(tape, &self.store, input),
        }
    }

    pub fn policy_forward(&self, feature: &Array1<f64>) -> ActionDistribution {
        let mut tape = Tape::new();
        let f = tape.constant(feature.clone().insert_axis(Axis(0)));
        let (mean, ls) = self.policy_head(&mut tape, f);
        let (m, l) = (tape.value(mean), tape.value(ls));
        ActionDistribution {
            mean: [m[[0, 0]], m[[0, 1]]],
            log_std: [l[[0, 0]], l[[0, 1]]],
        }
    }

    /// Q values of several actions at one feature.
    pub fn q_values(&self, feature: &Array1<f64>, actions: &[Action], which: QKind) -> Vec<f64> {
        let n = actions.len();
        let mut tape = Tape::new();
        let feats = feature.broadcast((n, feature.len())).expect("broadcast").to_owned();
        let f = tape.constant(feats);
        let a = tape.constant(self.normalize_actions(actions));
        let q = self.q(&mut tape, f, a, which);
        tape.value(q).column(0).to_vec()
    }

    pub fn q_value(&self, feature: &Array1<f64>, action: Action, which: QKind) -> f64 {
        self.q_values(feature, &[action], which)[0]
    }

    /// `n x 2` matrix of actions divided by `max_step`.
    pub fn normalize_actions(&self, actions: &[Action]) -> Array2<f64> {
        Array2::from_shape_fn((actions.len(), 2), |(i, j)| {
            let a = actions[i];
            (if j == 0 { a.dx } else { a.dy }) / self.max_step
        })
    }

    /// Index of the candidate with the highest selection Q (first on ties).
    pub fn select_action(&self, feature: &Array1<f64>, candidates: &[Action]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::Usage("select_action needs at least one candidate".into()));
        }
        let q = self.q_values(feature, candidates, QKind::Selection);
        Ok(argmax_first(&q).expect("non-empty"))
    }

    /// Full decision pipeline for one state.
    pub fn act<R: Rng>(&self, state: &EnvState, mode: ActMode, m: usize, rng: &mut R) -> Result<Decision> {
        if state.done {
            return Err(Error::Usage("act called on a finished episode".into()));
        }
        if m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        let obs = Observation::from_state(state);
        let mut tape = Tape::new();
        let trunk = self.trunk(&mut tape, &[&obs]);
        let feature = tape.value(trunk.features).row(0).to_owned();
        let attention = tape.attention_weights(trunk.attention).expect("attention")[0].clone();
        let dist = self.policy_forward(&feature);
        let candidates = match mode {
            ActMode::Stochastic => sample_action_set(&dist, m, rng, self.max_step),
            ActMode::Deterministic => vec![dist.mode(self.max_step); m],
        };
        let selected = if candidates.len() == 1 {
            0
        } else {
            self.select_action(&feature, &candidates)?
        };
        Ok(Decision {
            action: candidates[selected],
            candidates,
            selected,
            attention,
            feature,
        })
    }
}

fn polyak(store: &mut ParamStore, pairs: &[(ParamId, ParamId)], tau: f64) {
    for &(online, target) in pairs {
        let src = store.value(online).clone();
        let dst = store.value_mut(target);
        ndarray::Zip::from(dst)
            .and(&src)
            .for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reset_seeded, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_nets(seed: u64) -> AgentNetworks {
        let dims = NetworkDims {
            policy_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            selection_hidden: vec![16],
        };
        AgentNetworks::new(dims, 0.25, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_widths() {
        let nets = AgentNetworks::new(NetworkDims::default(), 0.25, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(nets.policy.widths(), vec![131, 256, 256, 256, 4]);
        assert_eq!(nets.critic1.widths(), vec![133, 256, 256, 256, 1]);
        assert_eq!(nets.selection.widths(), vec![133, 256, 256, 1]);
    }

    #[test]
    fn targets_start_equal() {
        let nets = small_nets(1);
        for (o, t) in nets.critic_pairs().into_iter().chain(nets.selection_pairs()) {
            assert_eq!(nets.store.value(o), nets.store.value(t));
        }
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax_first(&[0.1, 0.5, 0.3, 0.2]), Some(1));
        assert_eq!(argmax_first(&[0.7]), Some(0));
        assert_eq!(argmax_first(&[0.9, 0.1, 0.9]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn empty_candidates_is_usage_error() {
        let nets = small_nets(2);
        let f = Array1::zeros(ROBOT_FEATURE_WIDTH);
        assert!(matches!(nets.select_action(&f, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn degenerate_gaussian_samples_equal_mode() {
        let d = ActionDistribution {
            mean: [0.3, -1.2],
            log_std: [LOG_STD_MIN; 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in sample_action_set(&d, 4, &mut rng, 0.25) {
            assert!((a.dx - d.mode(0.25).dx).abs() < 1e-7);
            assert!((a.dy - d.mode(0.25).dy).abs() < 1e-7);
        }
    }

    #[test]
    fn samples_respect_step_bound() {
        let d = ActionDistribution {
            mean: [3.0, 3.0],
            log_std: [1.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_action_set(&d, 1000, &mut rng, 0.25)
            .iter()
            .all(|a| a.within(0.25)));
    }

    #[test]
    fn tape_log_prob_matches_closed_form() {
        let nets = small_nets(5);
        let mean = Array2::from_shape_vec((2, 2), vec![0.2, -0.4, 1.5, 0.0]).unwrap();
        let ls = Array2::from_shape_vec((2, 2), vec![-0.5, 0.3, -1.0, 0.0]).unwrap();
        let eps = Array2::from_shape_vec((2, 2), vec![0.7, -1.1, 0.1, 2.0]).unwrap();
        let mut tape = Tape::new();
        let (m, l) = (tape.constant(mean.clone()), tape.constant(ls.clone()));
        let s = nets.policy_sample(&mut tape, m, l, eps.clone());
        for b in 0..2 {
            let d = ActionDistribution {
                mean: [mean[[b, 0]], mean[[b, 1]]],
                log_std: [ls[[b, 0]], ls[[b, 1]]],
            };
            let u = [0, 1].map(|i| mean[[b, i]] + ls[[b, i]].exp() * eps[[b, i]]);
            let expect = d.squashed_log_prob(u, 0.25);
            assert!((tape.value(s.log_prob)[[b, 0]] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn act_is_bounded_and_deterministic() {
        let nets = small_nets(6);
        let state = reset_seeded(5, 9, &EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = nets.act(&state, ActMode::Deterministic, 4, &mut rng).unwrap();
        let b = nets.act(&state, ActMode::Deterministic, 4, &mut rng).unwrap();
        assert_eq!(a.action, b.action);
        let s = nets.act(&state, ActMode::Stochastic, 4, &mut rng).unwrap();
        assert!(s.action.within(0.25));
        assert_eq!(s.candidates.len(), 4);
        assert_eq!(s.attention.dim(), (6, 6));
    }

    #[test]
    fn trunk_batch_matches_single() {
        let nets = small_nets(7);
        let cfg = EnvConfig::default();
        let o1 = Observation::from_state(&reset_seeded(5, 1, &cfg).unwrap());
        let o2 = Observation::from_state(&reset_seeded(3, 2, &cfg).unwrap());
        let both = nets.features(&[&o1, &o2]);
        let one = nets.features(&[&o2]);
        for (a, b) in both.row(1).iter().zip(one.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
