mod common;

use common::{
    constant_output, directional_grad_error, directional_grad_error_on, mid_episode_state, networks, observation, rng,
};
use crowdnav::agent::{
    argmax_first, sample_action_set, ActMode, ActionDistribution, AgentNetworks, QKind, LOG_STD_MAX, LOG_STD_MIN,
};
use crowdnav::error::Error;
use crowdnav::gnn::ROBOT_FEATURE_WIDTH;
use crowdnav::nn::{Init, ParamStore, Tape, Var};
use crowdnav::Action;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

const MAX_STEP: f64 = 0.25;

fn random_feature(seed: u64, scale: f64) -> Array1<f64> {
    let mut r = rng(seed);
    Array1::from_shape_simple_fn(ROBOT_FEATURE_WIDTH, || scale * r.random_range(-1.0..1.0))
}

fn random_actions(seed: u64, n: usize) -> Vec<Action> {
    let mut r = rng(seed);
    (0..n).map(|_| common::random_action(&mut r, MAX_STEP)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn policy_forward_is_deterministic_and_bounded(seed in any::<u64>(), scale in 0.01f64..1e3) {
        let nets = networks(seed % 8);
        let f = random_feature(seed, scale);
        let a = nets.policy_forward(&f);
        let b = nets.policy_forward(&f);
        prop_assert_eq!(a, b);
        for i in 0..2 {
            prop_assert!(a.mean[i].is_finite());
            prop_assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&a.log_std[i]));
        }
    }

    #[test]
    fn sampled_actions_stay_in_the_disc(seed in any::<u64>(), m in 1usize..16, mx in -30.0f64..30.0, my in -30.0f64..30.0, ls in -20.0f64..2.0) {
        let dist = ActionDistribution { mean: [mx, my], log_std: [ls, ls] };
        let set = sample_action_set(&dist, m, &mut rng(seed), MAX_STEP);
        prop_assert_eq!(set.len(), m);
        prop_assert!(set.iter().all(|a| a.norm() <= MAX_STEP + 1e-12));
        prop_assert_eq!(sample_action_set(&dist, m, &mut rng(seed), MAX_STEP), set);
    }
}

#[test]
fn log_std_is_clamped_at_both_ends() {
    let mut nets = networks(1);
    let f = random_feature(2, 1.0);
    constant_output(&mut nets, |n| &n.policy, &[0.1, -0.2, 100.0, -100.0]);
    let d = nets.policy_forward(&f);
    assert_eq!(d.mean, [0.1, -0.2]);
    assert_eq!(d.log_std, [LOG_STD_MAX, LOG_STD_MIN]);
}

#[test]
fn degenerate_std_gives_the_squashed_mean() {
    let dist = ActionDistribution {
        mean: [0.4, -0.7],
        log_std: [LOG_STD_MIN, LOG_STD_MIN],
    };
    let set = sample_action_set(&dist, 4, &mut rng(3), MAX_STEP);
    let mode = dist.mode(MAX_STEP);
    assert!((mode.dx - MAX_STEP * 0.4f64.tanh()).abs() < 1e-15);
    for a in &set {
        assert!((a.dx - mode.dx).abs() < 1e-8 && (a.dy - mode.dy).abs() < 1e-8);
    }
    // Saturated means land on the disc boundary.
    let far = ActionDistribution {
        mean: [20.0, 20.0],
        log_std: [LOG_STD_MIN, LOG_STD_MIN],
    };
    let a = far.mode(MAX_STEP);
    assert!((a.norm() - MAX_STEP).abs() < 1e-12);
    assert!((a.dx - a.dy).abs() < 1e-15);
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

#[test]
fn squashed_samples_follow_the_analytic_density() {
    let (mu, log_std) = (0.3, -0.5);
    let sigma = f64::exp(log_std);
    let dist = ActionDistribution {
        mean: [mu, 0.0],
        log_std: [log_std, LOG_STD_MIN],
    };
    let n = 100_000;
    let mut xs: Vec<f64> = sample_action_set(&dist, n, &mut rng(4), MAX_STEP)
        .iter()
        .map(|a| a.dx)
        .collect();
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| normal_cdf(((x / MAX_STEP).atanh() - mu) / sigma);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n as f64)
                .abs()
                .max((f - (i + 1) as f64 / n as f64).abs())
        })
        .fold(0.0f64, f64::max);
    assert!(ks < 5e-2, "KS distance {ks}");

    // The x part of the log density is the derivative of that CDF.
    let y_part = -LOG_STD_MIN - 0.5 * (2.0 * std::f64::consts::PI).ln() - MAX_STEP.ln();
    for x in [-0.2, -0.05, 0.0, 0.1, 0.2] {
        let u = (x / MAX_STEP).atanh();
        let logp_x = dist.squashed_log_prob([u, 0.0], MAX_STEP) - y_part;
        let h = 1e-6;
        let numeric = (cdf(x + h) - cdf(x - h)) / (2.0 * h);
        assert!((logp_x.exp() - numeric).abs() < 1e-5 * numeric.max(1.0), "x={x}");
    }
}

#[test]
fn squashed_density_integrates_to_one() {
    let dist = ActionDistribution {
        mean: [0.3, -0.2],
        log_std: [0.0, -0.3],
    };
    let k = 600;
    let cell = 2.0 * MAX_STEP / k as f64;
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let x = -MAX_STEP + (i as f64 + 0.5) * cell;
            let y = -MAX_STEP + (j as f64 + 0.5) * cell;
            let u = [(x / MAX_STEP).atanh(), (y / MAX_STEP).atanh()];
            total += dist.squashed_log_prob(u, MAX_STEP).exp() * cell * cell;
        }
    }
    assert!((total - 1.0).abs() < 1e-2, "integral {total}");
}

#[test]
fn twin_critics_take_the_minimum() {
    let mut nets = networks(5);
    constant_output(&mut nets, |n| &n.critic1, &[1.0]);
    constant_output(&mut nets, |n| &n.critic2, &[2.0]);
    let f = random_feature(6, 1.0);
    for a in random_actions(7, 5) {
        assert_eq!(nets.q_value(&f, a, QKind::OnlineMin), 1.0);
    }
    nets.polyak_critics(1.0);
    assert_eq!(nets.q_value(&f, Action::new(0.0, 0.0), QKind::TargetMin), 1.0);
}

#[test]
fn fresh_targets_match_online_networks() {
    let nets = networks(8);
    let f = random_feature(9, 1.0);
    let actions = random_actions(10, 6);
    let online = nets.q_values(&f, &actions, QKind::Selection);
    assert_eq!(online, nets.q_values(&f, &actions, QKind::SelectionTarget));
    assert_eq!(
        nets.q_values(&f, &actions, QKind::OnlineMin),
        nets.q_values(&f, &actions, QKind::TargetMin)
    );
    assert!(online.iter().all(|q| q.is_finite()));
    for (i, &a) in actions.iter().enumerate() {
        assert!((nets.q_value(&f, a, QKind::Selection) - online[i]).abs() < 1e-12);
    }
}

#[test]
fn selection_picks_the_first_maximum() {
    assert_eq!(argmax_first(&[0.1, 0.5, 0.3, 0.2]), Some(1));
    assert_eq!(argmax_first(&[0.5, 0.5, 0.1]), Some(0));
    assert_eq!(argmax_first(&[]), None);

    let nets = networks(11);
    for s in 0..50 {
        let f = random_feature(100 + s, 1.0);
        let c = random_actions(200 + s, 4);
        let q = nets.q_values(&f, &c, QKind::Selection);
        let k = nets.select_action(&f, &c).unwrap();
        assert!(q.iter().all(|&x| x <= q[k]));
        assert_eq!(Some(k), argmax_first(&q));
    }
    let f = random_feature(12, 1.0);
    let a = Action::new(0.1, 0.05);
    assert_eq!(nets.select_action(&f, &[a]).unwrap(), 0);
    // Duplicates tie; the earlier index wins.
    let b = Action::new(-0.1, 0.0);
    let k = nets.select_action(&f, &[a, b, a]).unwrap();
    assert_ne!(k, 2);
    assert!(matches!(nets.select_action(&f, &[]), Err(Error::Usage(_))));
}

#[test]
fn act_modes_and_bounds() {
    let nets = networks(13);
    let state = mid_episode_state(5, 14, 3);
    let d1 = nets.act(&state, ActMode::Deterministic, 4, &mut rng(1)).unwrap();
    let d2 = nets.act(&state, ActMode::Deterministic, 4, &mut rng(2)).unwrap();
    assert_eq!(d1.action, d2.action);
    assert_eq!(d1.action, nets.policy_forward(&d1.feature).mode(MAX_STEP));
    assert_eq!(d1.attention.dim(), (6, 6));

    for s in 0..20 {
        let d = nets.act(&state, ActMode::Stochastic, 4, &mut rng(s)).unwrap();
        assert_eq!(d.candidates.len(), 4);
        assert!(d.action.norm() <= MAX_STEP + 1e-12);
        assert_eq!(d.action, d.candidates[d.selected]);
    }

    // m = 1 is a plain policy sample.
    let mut r = rng(15);
    let mut replay = r.clone();
    let d = nets.act(&state, ActMode::Stochastic, 1, &mut r).unwrap();
    let dist = nets.policy_forward(&d.feature);
    assert_eq!(vec![d.action], sample_action_set(&dist, 1, &mut replay, MAX_STEP));
    assert_eq!(d.selected, 0);

    assert!(matches!(
        nets.act(&state, ActMode::Stochastic, 0, &mut rng(0)),
        Err(Error::InvalidParameter(_))
    ));
    let mut done = state.clone();
    done.done = true;
    assert!(matches!(
        nets.act(&done, ActMode::Stochastic, 4, &mut rng(0)),
        Err(Error::Usage(_))
    ));
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Array2<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.mean(p)
}

#[test]
fn policy_mean_gradient_matches_finite_differences() {
    let nets = networks(16);
    let mut store: ParamStore = nets.store.clone();
    let fid = store.add("probe.feature", (1, ROBOT_FEATURE_WIDTH), Init::Constant(0.0));
    store
        .value_mut(fid)
        .assign(&random_feature(17, 1.0).insert_axis(ndarray::Axis(0)));
    let weights = Array2::from_shape_vec((1, 2), vec![0.7, -1.3]).unwrap();
    let f = |tape: &mut Tape, s: &ParamStore| {
        let x = tape.param(s, fid);
        let out = nets.policy.forward(tape, s, x);
        let mean = tape.slice_cols(out, 0, 2);
        weighted_sum(tape, mean, &weights)
    };
    let on_feature = directional_grad_error_on(&store, &f, 20, 18, &|n| n == "probe.feature");
    assert!(on_feature < 1e-4, "feature direction error {on_feature}");
    let all = directional_grad_error(&store, &f, 20, 19);
    assert!(all < 1e-4, "parameter direction error {all}");
}

fn with_store(nets: &AgentNetworks, s: &ParamStore) -> AgentNetworks {
    let mut n = nets.clone();
    n.store = s.clone();
    n
}

#[test]
fn end_to_end_policy_gradient_matches_finite_differences() {
    let nets = networks(20);
    let obs: Vec<_> = (0..3).map(|k| observation(2 + k, 21 + k as u64)).collect();
    let mut r = rng(22);
    let eps = Array2::from_shape_simple_fn((3, 2), || r.random_range(-1.0..1.0));
    let weights = Array2::from_shape_simple_fn((3, 2), || r.random_range(-1.0..1.0));
    let f = |tape: &mut Tape, s: &ParamStore| {
        let n = with_store(&nets, s);
        let refs: Vec<_> = obs.iter().collect();
        let t = n.trunk(tape, &refs);
        let (mean, log_std) = n.policy_head(tape, t.features);
        let sample = n.policy_sample(tape, mean, log_std, eps.clone());
        let a = weighted_sum(tape, sample.action, &weights);
        let lp = tape.mean(sample.log_prob);
        let lp = tape.scale(lp, 0.1);
        tape.add(a, lp)
    };
    let err = directional_grad_error(&nets.store, &f, 20, 23);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn end_to_end_critic_gradient_matches_finite_differences() {
    let nets = networks(24);
    let obs: Vec<_> = (0..3).map(|k| observation(3 + k, 25 + k as u64)).collect();
    let actions = random_actions(26, 3);
    let weights = Array2::from_shape_vec((3, 1), vec![0.5, -1.0, 2.0]).unwrap();
    for which in [QKind::OnlineMin, QKind::Selection] {
        let f = |tape: &mut Tape, s: &ParamStore| {
            let n = with_store(&nets, s);
            let refs: Vec<_> = obs.iter().collect();
            let t = n.trunk(tape, &refs);
            let a = tape.constant(n.normalize_actions(&actions));
            let q = n.q(tape, t.features, a, which);
            weighted_sum(tape, q, &weights)
        };
        let err = directional_grad_error(&nets.store, &f, 20, 27);
        assert!(err < 1e-4, "{which:?} relative error {err}");
    }
}
