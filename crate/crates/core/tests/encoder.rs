mod common;

use common::{directional_grad_error, rng, v};
use crowdnav::gnn::{attention_weights, gnn_layer, robot_feature, InteractionGnn, ROBOT_FEATURE_WIDTH};
use crowdnav::history::{
    history_rows, subgraph_layer, vectorize_step, HistorySet, HistoryVector, SubgraphEncoder, AGENT_FEATURE_WIDTH,
    SUBGRAPH_HIDDEN,
};
use crowdnav::nn::{Block, ParamStore, Tape, Var};
use ndarray::{s, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

fn encoder(seed: u64) -> (ParamStore, SubgraphEncoder) {
    let mut store = ParamStore::new();
    let enc = SubgraphEncoder::new(&mut store, "subgraph");
    store.init_default(&mut rng(seed));
    (store, enc)
}

fn graph(seed: u64) -> (ParamStore, InteractionGnn) {
    let mut store = ParamStore::new();
    let g = InteractionGnn::new(&mut store, "gnn");
    store.init_default(&mut rng(seed));
    (store, g)
}

fn random_history<R: Rng>(r: &mut R) -> HistorySet {
    let mut p = v(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0));
    let mut h = HistorySet::stationary(p, 0.3);
    for _ in 0..3 {
        let d = v(r.random_range(-0.17..0.17), r.random_range(-0.17..0.17));
        h.push(vectorize_step(p, p + d, d / 0.25, 0.3));
        p += d;
    }
    h
}

fn random_matrix<R: Rng>(r: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-2.0..2.0))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn vectorize_examples() {
    let a = vectorize_step(v(0.0, 0.0), v(0.25, 0.0), v(1.0, 0.0), 0.3);
    assert_eq!(a.to_array(), [0.0, 0.0, 1.0, 0.0, 0.3, 0.25, 0.0]);
    let b = vectorize_step(v(1.0, 2.0), v(1.0, 2.0), v(0.0, 0.0), 0.3);
    assert_eq!(b.to_array(), [1.0, 2.0, 0.0, 0.0, 0.3, 1.0, 2.0]);
    let mut r = rng(1);
    for _ in 0..20 {
        assert!(random_history(&mut r).is_chained());
    }
}

#[test]
fn subgraph_layer_row_symmetry() {
    let (store, enc) = encoder(2);
    let row = random_matrix(&mut rng(3), 1, 7);
    let x = row.broadcast((3, 7)).unwrap().to_owned();
    let y = subgraph_layer(&enc.layers[0], &store, &x);
    assert_eq!(y.dim(), (3, 128));
    for i in 1..3 {
        assert_eq!(y.row(i), y.row(0));
    }
    assert_eq!(y.slice(s![.., ..64]), y.slice(s![.., 64..]));
}

#[test]
fn encoder_zero_weights_give_zero_feature() {
    let (mut store, enc) = encoder(4);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let fill = if name.ends_with("norm.gain") { 1.0 } else { 0.0 };
        store.value_mut(id).fill(fill);
    }
    let out = enc.encode_agents(&store, &[random_history(&mut rng(5))]);
    assert!(out.iter().all(|&x| x == 0.0));
}

#[test]
fn weight_sharing_swaps_features_exactly() {
    let (store, enc) = encoder(6);
    let mut r = rng(7);
    let (a, b, c) = (random_history(&mut r), random_history(&mut r), random_history(&mut r));
    let f = enc.encode_agents(&store, &[a, b, c]);
    let g = enc.encode_agents(&store, &[b, a, c]);
    assert_eq!(f.row(0), g.row(1));
    assert_eq!(f.row(1), g.row(0));
    assert_eq!(f.row(2), g.row(2));
    let same = enc.encode_agents(&store, &[a, a]);
    assert_eq!(same.row(0), same.row(1));
    for n in 1..=11 {
        let hs: Vec<HistorySet> = (0..n).map(|_| random_history(&mut r)).collect();
        assert_eq!(enc.encode_agents(&store, &hs).dim(), (n, AGENT_FEATURE_WIDTH));
    }
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subgraph_layer_is_row_equivariant(seed in any::<u64>(), p in 0usize..6, wide in any::<bool>()) {
        let (store, enc) = encoder(seed);
        let layer = if wide { &enc.layers[1] } else { &enc.layers[0] };
        let d_in = if wide { 128 } else { 7 };
        let x = random_matrix(&mut rng(seed ^ 1), 3, d_in);
        let perm = PERMS[p];
        let xp = x.select(Axis(0), &perm);
        let y = subgraph_layer(layer, &store, &x);
        let yp = subgraph_layer(layer, &store, &xp);
        prop_assert!(max_abs_diff(&y.select(Axis(0), &perm), &yp) <= 1e-12);
        for i in 0..3 {
            prop_assert_eq!(y.slice(s![i, SUBGRAPH_HIDDEN..]), yp.slice(s![0, SUBGRAPH_HIDDEN..]));
        }
        prop_assert!(y.slice(s![.., ..SUBGRAPH_HIDDEN]).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn agent_feature_ignores_history_order(seed in any::<u64>(), p in 1usize..6) {
        let (store, enc) = encoder(seed);
        let h = random_history(&mut rng(seed ^ 2));
        let perm = PERMS[p];
        let shuffled = HistorySet(perm.map(|k| h.0[k]));
        let a = enc.encode_agents(&store, &[h]);
        let b = enc.encode_agents(&store, &[shuffled]);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-6);
        prop_assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), n in 1usize..=11) {
        let (store, g) = graph(seed);
        let nodes = random_matrix(&mut rng(seed ^ 3), n, 128);
        let att = attention_weights(&g, &store, &nodes);
        prop_assert_eq!(att.dim(), (n, n));
        for row in att.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn graph_layer_is_human_equivariant(seed in any::<u64>(), n in 2usize..=10) {
        let (store, g) = graph(seed);
        let mut r = rng(seed ^ 4);
        let nodes = random_matrix(&mut r, n + 1, 128);
        let mut perm: Vec<usize> = (1..=n).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let order: Vec<usize> = std::iter::once(0).chain(perm.iter().copied()).collect();
        let out = gnn_layer(&g, &store, &nodes);
        let out_p = gnn_layer(&g, &store, &nodes.select(Axis(0), &order));
        prop_assert!(max_abs_diff(&out.select(Axis(0), &order), &out_p) <= 1e-6);
        let goal = v(0.3, 2.0);
        let f = robot_feature(&out, goal, 1.0);
        let fp = robot_feature(&out_p, goal, 1.0);
        prop_assert!((&f - &fp).iter().all(|d| d.abs() <= 1e-6));
    }
}

#[test]
fn attention_examples() {
    let (store, g) = graph(8);
    let row = random_matrix(&mut rng(9), 1, 128);
    let two = ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap();
    let att = attention_weights(&g, &store, &two);
    assert!(att.iter().all(|&w| w == 0.5));
    let att = attention_weights(&g, &store, &row);
    assert_eq!(att, Array2::from_elem((1, 1), 1.0));
}

#[test]
fn graph_layer_examples() {
    let (mut store, g) = graph(10);
    let mut r = rng(11);
    let mut nodes = random_matrix(&mut r, 4, 128);
    let dup = nodes.row(1).to_owned();
    nodes.row_mut(3).assign(&dup);
    let out = gnn_layer(&g, &store, &nodes);
    assert_eq!(out.row(1), out.row(3));
    store.value_mut(g.value.weight).fill(0.0);
    let out = gnn_layer(&g, &store, &nodes);
    assert!(out.iter().all(|&x| x == 0.0));
}

#[test]
fn robot_feature_examples() {
    let zero = Array2::zeros((3, 128));
    let f = robot_feature(&zero, v(0.0, 4.0), 1.0);
    assert_eq!(f.len(), ROBOT_FEATURE_WIDTH);
    assert!(f.slice(s![..128]).iter().all(|&x| x == 0.0));
    assert_eq!(f.slice(s![128..]).to_vec(), vec![0.0, 4.0, 1.0]);
    for n in 1..=11 {
        assert_eq!(robot_feature(&Array2::zeros((n, 128)), v(0.0, 0.0), 1.0).len(), 131);
    }
    // Robot standing on its goal sees a zero relative goal.
    let mut state = common::mid_episode_state(2, 3, 0);
    state.robot.goal = state.robot.agent.position;
    let obs = crowdnav::agent::Observation::from_state(&state);
    assert_eq!(obs.goal, v(0.0, 0.0));
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Array2<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.mean(p)
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (store, enc) = encoder(12);
    let mut r = rng(13);
    let hs: Vec<HistorySet> = (0..4).map(|_| random_history(&mut r)).collect();
    let rows = history_rows(&hs);
    let weights = random_matrix(&mut r, 4, 128);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let x = tape.constant(rows.clone());
        let out = enc.forward(tape, s, x);
        weighted_sum(tape, out, &weights)
    };
    let err = directional_grad_error(&store, &f, 20, 14);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn graph_gradients_match_finite_differences() {
    let (store, g) = graph(15);
    let mut r = rng(16);
    let nodes = random_matrix(&mut r, 6, 128);
    let weights = random_matrix(&mut r, 1, 128);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let x = tape.constant(nodes.clone());
        let (out, _) = g.forward(tape, s, x, &[Block { start: 0, len: 6 }]);
        let robot = tape.select_rows(out, &[0]);
        weighted_sum(tape, robot, &weights)
    };
    let err = directional_grad_error(&store, &f, 20, 17);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn history_vector_fields_round_trip() {
    let h = HistoryVector::new(v(1.0, 2.0), v(3.0, 4.0), 0.5, v(6.0, 7.0));
    assert_eq!(h.to_array(), [1.0, 2.0, 3.0, 4.0, 0.5, 6.0, 7.0]);
    let rel = h.relative_to(v(1.0, 1.0));
    assert_eq!(rel.to_array(), [0.0, 1.0, 3.0, 4.0, 0.5, 5.0, 6.0]);
}
