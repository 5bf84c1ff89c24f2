#![allow(dead_code)]

use std::sync::Arc;

use crowdnav::agent::{AgentNetworks, NetworkDims, Observation};
use crowdnav::nn::{Gradients, Mlp, ParamStore, Tape, Var};
use crowdnav::sim::{env_step, reset_seeded, EnvConfig, EnvState};
use crowdnav::trainer::Transition;
use crowdnav::{Action, Vec2};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_action<R: Rng>(rng: &mut R, max_step: f64) -> Action {
    let r = max_step * rng.random::<f64>().sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    Action::new(r * th.cos(), r * th.sin())
}

/// States reached by a few random robot steps, so histories carry motion.
pub fn mid_episode_state(n_humans: usize, seed: u64, steps: usize) -> EnvState {
    let env = EnvConfig::default();
    let mut r = rng(seed ^ 0x5eed);
    let mut state = reset_seeded(n_humans, seed, &env).unwrap();
    for _ in 0..steps {
        let out = env_step(&state, random_action(&mut r, env.max_step()), &env).unwrap();
        if out.done {
            break;
        }
        state = out.state;
    }
    state
}

pub fn observation(n_humans: usize, seed: u64) -> Observation {
    Observation::from_state(&mid_episode_state(n_humans, seed, 3))
}

pub fn networks(seed: u64) -> AgentNetworks {
    AgentNetworks::new(NetworkDims::default(), EnvConfig::default().max_step(), &mut rng(seed))
}

pub fn small_networks(seed: u64) -> AgentNetworks {
    let dims = NetworkDims {
        policy_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        selection_hidden: vec![32],
    };
    AgentNetworks::new(dims, EnvConfig::default().max_step(), &mut rng(seed))
}

/// Zeroes the last layer of one network and sets its bias to `bias`.
pub fn constant_output(nets: &mut AgentNetworks, which: fn(&AgentNetworks) -> &Mlp, bias: &[f64]) {
    let last = which(nets).layers.last().unwrap().clone();
    nets.store.value_mut(last.weight).fill(0.0);
    let b = nets.store.value_mut(last.bias.unwrap());
    for (dst, &src) in b.iter_mut().zip(bias) {
        *dst = src;
    }
}

/// Random transitions from short random rollouts.
pub fn transitions(n: usize, seed: u64) -> Vec<Transition> {
    let env = EnvConfig::default();
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut case = seed * 1000;
    while out.len() < n {
        let mut state = reset_seeded(5, case, &env).unwrap();
        case += 1;
        let mut obs = Arc::new(Observation::from_state(&state));
        while !state.done && out.len() < n {
            let a = random_action(&mut r, env.max_step());
            let step = env_step(&state, a, &env).unwrap();
            let next = Arc::new(Observation::from_state(&step.state));
            out.push(Transition {
                obs: obs.clone(),
                action: a,
                reward: step.reward,
                next_obs: next.clone(),
                done: step.done,
            });
            obs = next;
            state = step.state;
        }
    }
    out
}

fn perturbed(store: &ParamStore, dir: &[Array2<f64>], h: f64) -> ParamStore {
    let mut s = store.clone();
    for (id, d) in store.ids().zip(dir) {
        s.value_mut(id).scaled_add(h, d);
    }
    s
}

/// Largest relative error between the analytic directional derivative of a
/// scalar tape function and its central difference (step 1e-5), over
/// `n_dirs` random unit directions in parameter space.
pub fn directional_grad_error(
    store: &ParamStore,
    f: &dyn Fn(&mut Tape, &ParamStore) -> Var,
    n_dirs: usize,
    seed: u64,
) -> f64 {
    directional_grad_error_on(store, f, n_dirs, seed, &|_| true)
}

/// Same, with directions restricted to the parameters whose names pass `keep`.
pub fn directional_grad_error_on(
    store: &ParamStore,
    f: &dyn Fn(&mut Tape, &ParamStore) -> Var,
    n_dirs: usize,
    seed: u64,
    keep: &dyn Fn(&str) -> bool,
) -> f64 {
    let h = 1e-5;
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads: Gradients = tape.backward(out);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = f(&mut t, s);
        t.scalar(v)
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let mut dir: Vec<Array2<f64>> = store
            .ids()
            .map(|id| {
                let on = keep(store.name(id));
                store
                    .value(id)
                    .mapv(|_| if on { r.random::<f64>() * 2.0 - 1.0 } else { 0.0 })
            })
            .collect();
        let norm = dir
            .iter()
            .map(|d| d.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        dir.iter_mut().for_each(|d| d.mapv_inplace(|x| x / norm));
        let analytic: f64 = store
            .ids()
            .zip(&dir)
            .map(|(id, d)| grads.get(id).map_or(0.0, |g| (g * d).sum()))
            .sum();
        let numeric = (eval(&perturbed(store, &dir, h)) - eval(&perturbed(store, &dir, -h))) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

pub fn v(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}
