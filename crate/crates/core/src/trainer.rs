//! Demonstrations, imitation pretraining, SAC and selection updates, and the
//! two-stage training loop.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::agent::{argmax_first, sample_action_set, ActMode, ActionDistribution, AgentNetworks, Observation, QKind};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, ModelPolicy};
use crate::nn::{Adam, AdamConfig, Tape};
use crate::sim::{env_step, orca_robot_action, reset_seeded, EnvConfig, StepEvent};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub il_episodes: usize,
    /// Gradient steps taken on the demonstrations.
    pub il_updates: usize,
    pub rl_episodes: usize,
    pub il_learning_rate: f64,
    pub rl_learning_rate: f64,
    pub m: usize,
    pub tau: f64,
    pub buffer_capacity: usize,
    /// Gradient updates per environment step in the RL stage.
    pub updates_per_step: usize,
    /// When false the policy loss does not reach the shared encoder and graph layer.
    pub actor_updates_trunk: bool,
    /// RL episodes between evaluation snapshots (0 disables them).
    pub eval_every: usize,
    /// RL episodes between checkpoints (0 keeps only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.05,
            batch_size: 256,
            il_episodes: 2000,
            il_updates: 2000,
            rl_episodes: 15000,
            il_learning_rate: 1e-3,
            rl_learning_rate: 3e-4,
            m: 4,
            tau: 0.005,
            buffer_capacity: 400_000,
            updates_per_step: 1,
            actor_updates_trunk: false,
            eval_every: 1000,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let bad = |k: &'static str, m: &str| Err((k, m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if !(self.il_learning_rate > 0.0 && self.il_learning_rate.is_finite()) {
            return bad("il_learning_rate", "must be positive");
        }
        if !(self.rl_learning_rate > 0.0 && self.rl_learning_rate.is_finite()) {
            return bad("rl_learning_rate", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.m == 0 {
            return bad("m", "must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity", "must be at least 1");
        }
        if self.il_episodes == 0 {
            return bad("il_episodes", "must be at least 1");
        }
        Ok(())
    }
}

/// One stored step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub done: bool,
}

/// A demonstration step with the discounted return observed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub transition: Transition,
    pub discounted_return: f64,
}

/// Summary of one demonstration or training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub event: StepEvent,
    pub steps: usize,
    pub undiscounted_return: f64,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Seed of the `k`-th training scenario. Evaluation blocks start at small
/// seeds, so training seeds live above `2^40`.
pub fn train_case_seed(run_seed: u64, k: u64) -> u64 {
    (1u64 << 40) + (run_seed << 24).wrapping_add(k)
}

/// Runs the ORCA robot (humans see it) for `k` episodes.
pub fn generate_demonstrations(
    k: usize,
    seed: u64,
    n_humans: usize,
    env: &EnvConfig,
    gamma: f64,
) -> Result<(Vec<Demonstration>, Vec<EpisodeSummary>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("demonstration count must be at least 1".into()));
    }
    let visible = env.clone().with_visible_robot(true);
    let mut demos = Vec::new();
    let mut summaries = Vec::with_capacity(k);
    for e in 0..k {
        let case = train_case_seed(seed, e as u64);
        let mut state = reset_seeded(n_humans, case, &visible)?;
        let mut obs = Arc::new(Observation::from_state(&state));
        let mut episode = Vec::new();
        let mut event = StepEvent::Moving;
        while !state.done {
            let action = orca_robot_action(&state, &visible);
            let out = env_step(&state, action, &visible)?;
            let next_obs = Arc::new(Observation::from_state(&out.state));
            episode.push(Transition {
                obs: obs.clone(),
                action,
                reward: out.reward,
                next_obs: next_obs.clone(),
                done: out.done,
            });
            event = out.event;
            obs = next_obs;
            state = out.state;
        }
        let total: f64 = episode.iter().map(|t| t.reward).sum();
        summaries.push(EpisodeSummary {
            seed: case,
            event,
            steps: episode.len(),
            undiscounted_return: total,
        });
        let mut ret = 0.0;
        let mut with_returns: Vec<Demonstration> = episode
            .into_iter()
            .rev()
            .map(|t| {
                ret = t.reward + gamma * ret;
                Demonstration {
                    transition: t,
                    discounted_return: ret,
                }
            })
            .collect();
        with_returns.reverse();
        demos.extend(with_returns);
    }
    Ok((demos, summaries))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub critic: f64,
    pub policy: f64,
    pub selection: f64,
}

fn standard_normal<R: Rng>(rng: &mut R, rows: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, 2), || rng.sample(StandardNormal))
}

fn column(values: impl Iterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

/// Mean squared error node against a constant target column.
fn mse(tape: &mut Tape, pred: crate::nn::Var, target: &Array2<f64>) -> crate::nn::Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// One supervised step on demonstrations: the squashed policy mean regresses
/// onto the demonstrated action, critics and selection network onto the
/// observed discounted return.
pub fn imitation_update(nets: &mut AgentNetworks, adam: &mut Adam, batch: &[&Demonstration], lr: f64) -> Losses {
    let obs: Vec<&Observation> = batch.iter().map(|d| d.transition.obs.as_ref()).collect();
    let actions: Vec<Action> = batch.iter().map(|d| d.transition.action).collect();
    let returns = column(batch.iter().map(|d| d.discounted_return));

    let mut tape = Tape::new();
    let f = nets.trunk(&mut tape, &obs).features;
    let (mean, _) = nets.policy_head(&mut tape, f);
    let squashed = tape.tanh(mean);
    let pred = tape.disc_project(squashed, 1.0);
    let demo = tape.constant(nets.normalize_actions(&actions));
    let diff = tape.sub(pred, demo);
    let sq = tape.square(diff);
    let policy_loss = tape.mean(sq);

    let input = tape.concat_cols(&[f, demo]);
    let q1 = nets.critic1.forward(&mut tape, &nets.store, input);
    let q2 = nets.critic2.forward(&mut tape, &nets.store, input);
    let qs = nets.selection.forward(&mut tape, &nets.store, input);
    let l1 = mse(&mut tape, q1, &returns);
    let l2 = mse(&mut tape, q2, &returns);
    let critic_loss = tape.add(l1, l2);
    let selection_loss = mse(&mut tape, qs, &returns);

    let total = tape.add(policy_loss, critic_loss);
    let total = tape.add(total, selection_loss);
    let grads = tape.backward(total);
    adam.step(&mut nets.store, &grads, lr);
    Losses {
        critic: tape.scalar(critic_loss),
        policy: tape.scalar(policy_loss),
        selection: tape.scalar(selection_loss),
    }
}

/// Robot features of a batch, computed before the SAC step, reused by the
/// selection update.
#[derive(Clone, Debug)]
pub struct BatchFeatures {
    pub current: Array2<f64>,
    pub next: Array2<f64>,
}

/// Twin-critic and policy step with polyak averaging of the critic targets.
pub fn sac_update<R: Rng>(
    nets: &mut AgentNetworks,
    adam: &mut Adam,
    batch: &[&Transition],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> (Losses, BatchFeatures) {
    let n = batch.len();
    let obs: Vec<&Observation> = batch.iter().map(|t| t.obs.as_ref()).collect();
    let next: Vec<&Observation> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
    let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();

    let mut target_tape = Tape::new();
    target_tape.set_detach_params(true);
    let fn_ = nets.trunk(&mut target_tape, &next).features;
    let next_features = target_tape.value(fn_).clone();
    let (mn, ln) = nets.policy_head(&mut target_tape, fn_);
    let s = nets.policy_sample(&mut target_tape, mn, ln, standard_normal(rng, n));
    let qt = nets.q(&mut target_tape, fn_, s.action, QKind::TargetMin);
    let (qt, logp) = (target_tape.value(qt), target_tape.value(s.log_prob));
    let y = column((0..n).map(|i| {
        let t = batch[i];
        let cont = if t.done { 0.0 } else { 1.0 };
        t.reward + cfg.gamma * cont * (qt[[i, 0]] - cfg.alpha * logp[[i, 0]])
    }));

    let mut tape = Tape::new();
    let f = nets.trunk(&mut tape, &obs).features;
    let current_features = tape.value(f).clone();
    let a = tape.constant(nets.normalize_actions(&actions));
    let input = tape.concat_cols(&[f, a]);
    let q1 = nets.critic1.forward(&mut tape, &nets.store, input);
    let q2 = nets.critic2.forward(&mut tape, &nets.store, input);
    let l1 = mse(&mut tape, q1, &y);
    let l2 = mse(&mut tape, q2, &y);
    let critic_loss = tape.add(l1, l2);

    let f_pi = if cfg.actor_updates_trunk {
        f
    } else {
        tape.constant(current_features.clone())
    };
    let (m, l) = nets.policy_head(&mut tape, f_pi);
    let s = nets.policy_sample(&mut tape, m, l, standard_normal(rng, n));
    tape.set_detach_params(true);
    let q_pi = nets.q(&mut tape, f_pi, s.action, QKind::OnlineMin);
    tape.set_detach_params(false);
    let ent = tape.scale(s.log_prob, cfg.alpha);
    let diff = tape.sub(ent, q_pi);
    let policy_loss = tape.mean(diff);

    let total = tape.add(critic_loss, policy_loss);
    let grads = tape.backward(total);
    adam.step(&mut nets.store, &grads, lr);
    nets.polyak_critics(cfg.tau);
    (
        Losses {
            critic: tape.scalar(critic_loss),
            policy: tape.scalar(policy_loss),
            selection: 0.0,
        },
        BatchFeatures {
            current: current_features,
            next: next_features,
        },
    )
}

/// TD step of the selection network: the bootstrap action at `s'` is the
/// selection argmax over `m` fresh policy samples.
pub fn selection_update<R: Rng>(
    nets: &mut AgentNetworks,
    adam: &mut Adam,
    batch: &[&Transition],
    features: &BatchFeatures,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> f64 {
    let n = batch.len();
    let m = cfg.m;
    let mut tape = Tape::new();
    tape.set_detach_params(true);
    let fn_ = tape.constant(features.next.clone());
    let (mean, ls) = nets.policy_head(&mut tape, fn_);
    let (mean, ls) = (tape.value(mean).clone(), tape.value(ls).clone());
    let mut candidates = Vec::with_capacity(n * m);
    for i in 0..n {
        let dist = ActionDistribution {
            mean: [mean[[i, 0]], mean[[i, 1]]],
            log_std: [ls[[i, 0]], ls[[i, 1]]],
        };
        candidates.extend(sample_action_set(&dist, m, rng, nets.max_step));
    }
    let repeated = features
        .next
        .select(Axis(0), &(0..n * m).map(|k| k / m).collect::<Vec<_>>());
    let fr = tape.constant(repeated);
    let ar = tape.constant(nets.normalize_actions(&candidates));
    let q = nets.q(&mut tape, fr, ar, QKind::Selection);
    let q = tape.value(q).column(0).to_vec();
    let chosen: Vec<Action> = (0..n)
        .map(|i| candidates[i * m + argmax_first(&q[i * m..(i + 1) * m]).expect("m >= 1")])
        .collect();
    let ac = tape.constant(nets.normalize_actions(&chosen));
    let qt = nets.q(&mut tape, fn_, ac, QKind::SelectionTarget);
    let qt = tape.value(qt);
    let y = column((0..n).map(|i| {
        let t = batch[i];
        let cont = if t.done { 0.0 } else { 1.0 };
        t.reward + cfg.gamma * cont * qt[[i, 0]]
    }));

    let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
    let mut tape = Tape::new();
    let f = tape.constant(features.current.clone());
    let a = tape.constant(nets.normalize_actions(&actions));
    let qs = nets.q(&mut tape, f, a, QKind::Selection);
    let loss = mse(&mut tape, qs, &y);
    let grads = tape.backward(loss);
    adam.step(&mut nets.store, &grads, lr);
    nets.polyak_selection(cfg.tau);
    tape.scalar(loss)
}

/// Where a run stands; persisted in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub il_done: bool,
    pub rl_episodes_done: usize,
    pub updates: u64,
    /// Data rows written to the training log so far.
    pub log_rows: usize,
    pub eval_rows: usize,
}

/// Full mutable state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub nets: AgentNetworks,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub buffer: ReplayBuffer,
    pub progress: TrainProgress,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest";
const LOG_HEADER: &str = "episode,stage,return,outcome,critic_loss,policy_loss,selection_loss,buffer_size";
const EVAL_HEADER: &str = "rl_episode,success,collision,timeout,time";

impl Trainer {
    pub fn new(config: RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = AgentNetworks::new(config.dims.clone(), config.env.max_step(), &mut rng);
        let adam = Adam::new(&nets.store, AdamConfig::default());
        let buffer = ReplayBuffer::new(config.train.buffer_capacity);
        Self {
            config,
            nets,
            adam,
            rng,
            buffer,
            progress: TrainProgress::default(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            nets: ck.nets,
            adam: ck.adam,
            rng: ck.rng,
            buffer: ck.replay.unwrap_or_else(|| ReplayBuffer::new(0)),
            progress: ck.progress,
        }
    }

    pub fn checkpoint(&self, with_replay: bool) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            nets: self.nets.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            progress: self.progress.clone(),
            replay: with_replay.then(|| self.buffer.clone()),
        }
    }

    /// Imitation stage: demonstrations, supervised updates, target sync and
    /// buffer initialization. Returns one log row per demo episode plus one per
    /// block of updates.
    pub fn run_imitation(&mut self, log: &mut LogSink) -> Result<()> {
        let cfg = self.config.train.clone();
        let (demos, summaries) = generate_demonstrations(
            cfg.il_episodes,
            self.config.seed,
            self.config.n_humans,
            &self.config.env,
            cfg.gamma,
        )?;
        for (k, s) in summaries.iter().enumerate() {
            log.row(
                &mut self.progress,
                k,
                "demo",
                s.undiscounted_return,
                s.event.label(),
                None,
                demos.len(),
            )?;
        }
        let block = (cfg.il_updates / 20).max(1);
        let mut acc = Losses::default();
        let mut count = 0;
        for u in 0..cfg.il_updates {
            let batch: Vec<&Demonstration> = (0..cfg.batch_size)
                .map(|_| &demos[self.rng.random_range(0..demos.len())])
                .collect();
            let l = imitation_update(&mut self.nets, &mut self.adam, &batch, cfg.il_learning_rate);
            acc.critic += l.critic;
            acc.policy += l.policy;
            acc.selection += l.selection;
            count += 1;
            if count == block || u + 1 == cfg.il_updates {
                let mean = Losses {
                    critic: acc.critic / count as f64,
                    policy: acc.policy / count as f64,
                    selection: acc.selection / count as f64,
                };
                log.row(&mut self.progress, u + 1, "il", f64::NAN, "", Some(mean), demos.len())?;
                acc = Losses::default();
                count = 0;
            }
        }
        self.nets.polyak_critics(1.0);
        self.nets.polyak_selection(1.0);
        self.buffer = ReplayBuffer::new(cfg.buffer_capacity);
        for d in demos {
            self.buffer.push(d.transition);
        }
        self.progress.il_done = true;
        Ok(())
    }

    /// One RL episode with an update after every step once the buffer holds a batch.
    pub fn run_rl_episode(&mut self, log: &mut LogSink) -> Result<EpisodeSummary> {
        let cfg = self.config.train.clone();
        let env = self.config.env.clone();
        let k = self.progress.rl_episodes_done;
        let case = train_case_seed(self.config.seed, (cfg.il_episodes + k) as u64);
        let mut state = reset_seeded(self.config.n_humans, case, &env)?;
        let mut obs = Arc::new(Observation::from_state(&state));
        let mut total = 0.0;
        let mut steps = 0;
        let mut event = StepEvent::Moving;
        let mut acc = Losses::default();
        let mut n_updates = 0usize;
        while !state.done {
            let decision = self.nets.act(&state, ActMode::Stochastic, cfg.m, &mut self.rng)?;
            let out = env_step(&state, decision.action, &env)?;
            let next_obs = Arc::new(Observation::from_state(&out.state));
            self.buffer.push(Transition {
                obs: obs.clone(),
                action: decision.action,
                reward: out.reward,
                next_obs: next_obs.clone(),
                done: out.done,
            });
            total += out.reward;
            steps += 1;
            event = out.event;
            obs = next_obs;
            state = out.state;
            if self.buffer.len() >= cfg.batch_size {
                for _ in 0..cfg.updates_per_step {
                    let l = self.update(&cfg)?;
                    acc.critic += l.critic;
                    acc.policy += l.policy;
                    acc.selection += l.selection;
                    n_updates += 1;
                }
            }
        }
        let losses = (n_updates > 0).then(|| Losses {
            critic: acc.critic / n_updates as f64,
            policy: acc.policy / n_updates as f64,
            selection: acc.selection / n_updates as f64,
        });
        self.progress.rl_episodes_done += 1;
        log.row(
            &mut self.progress,
            k,
            "rl",
            total,
            event.label(),
            losses,
            self.buffer.len(),
        )?;
        Ok(EpisodeSummary {
            seed: case,
            event,
            steps,
            undiscounted_return: total,
        })
    }

    fn update(&mut self, cfg: &TrainConfig) -> Result<Losses> {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.rng.random_range(0..self.buffer.len()))
            .collect();
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i).expect("index")).collect();
        let lr = cfg.rl_learning_rate;
        let (mut losses, feats) = sac_update(&mut self.nets, &mut self.adam, &batch, cfg, lr, &mut self.rng);
        losses.selection = selection_update(&mut self.nets, &mut self.adam, &batch, &feats, cfg, lr, &mut self.rng);
        self.progress.updates += 1;
        if losses.critic.is_finite() && losses.policy.is_finite() && losses.selection.is_finite() {
            Ok(losses)
        } else {
            Err(Error::Contract(format!(
                "non-finite loss at update {}",
                self.progress.updates
            )))
        }
    }
}

/// Append-only CSV writer for the training and evaluation logs.
pub struct LogSink {
    train: Option<fs::File>,
    eval: Option<fs::File>,
    /// Rows kept in memory, including any written before a resume.
    pub rows: Vec<String>,
}

impl LogSink {
    /// Logs kept only in memory.
    pub fn memory() -> Self {
        Self {
            train: None,
            eval: None,
            rows: Vec::new(),
        }
    }

    /// Opens the run's logs, truncating each to the rows recorded in `progress`.
    pub fn open(dir: &Path, progress: &TrainProgress) -> Result<Self> {
        let train_path = dir.join(LOG_FILE);
        let rows = truncate_log(&train_path, LOG_HEADER, progress.log_rows)?;
        truncate_log(&dir.join(EVAL_LOG_FILE), EVAL_HEADER, progress.eval_rows)?;
        let open = |p: PathBuf| {
            fs::OpenOptions::new()
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            train: Some(open(train_path)?),
            eval: Some(open(dir.join(EVAL_LOG_FILE))?),
            rows,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        progress: &mut TrainProgress,
        episode: usize,
        stage: &str,
        ret: f64,
        outcome: &str,
        losses: Option<Losses>,
        buffer: usize,
    ) -> Result<()> {
        let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        let (c, p, s) = losses.map_or((String::new(), String::new(), String::new()), |l| {
            (fmt(l.critic), fmt(l.policy), fmt(l.selection))
        });
        let line = format!("{episode},{stage},{},{outcome},{c},{p},{s},{buffer}", fmt(ret));
        if let Some(f) = &mut self.train {
            writeln!(f, "{line}").map_err(|e| Error::io(LOG_FILE, e))?;
        }
        self.rows.push(line);
        progress.log_rows += 1;
        Ok(())
    }

    fn eval_row(&mut self, progress: &mut TrainProgress, line: String) -> Result<()> {
        if let Some(f) = &mut self.eval {
            writeln!(f, "{line}").map_err(|e| Error::io(EVAL_LOG_FILE, e))?;
        }
        progress.eval_rows += 1;
        Ok(())
    }
}

fn truncate_log(path: &Path, header: &str, keep: usize) -> Result<Vec<String>> {
    let existing = match fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let rows: Vec<String> = existing.lines().skip(1).take(keep).map(str::to_string).collect();
    if rows.len() < keep {
        return Err(Error::Checkpoint(format!(
            "{} has {} rows but the checkpoint expects {keep}",
            path.display(),
            rows.len()
        )));
    }
    let mut text = format!("{header}\n");
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Runs (or resumes) training in `dir`, returning the final trainer state.
///
/// `stop_after` limits the number of RL episodes run by this call, which is
/// how interrupted runs are simulated.
pub fn train(config: RunConfig, dir: &Path, resume: bool, stop_after: Option<usize>) -> Result<Trainer> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
    let ck_path = dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT);
    let mut trainer = if resume {
        let ck = checkpoint::load(&ck_path)?;
        if ck.config != config {
            return Err(Error::Checkpoint(
                "checkpoint config differs from the requested config".into(),
            ));
        }
        Trainer::from_checkpoint(ck)
    } else {
        Trainer::new(config)
    };
    crate::config::write_atomic(
        &dir.join(crate::config::CONFIG_ECHO),
        trainer.config.to_text().as_bytes(),
    )?;
    let mut log = LogSink::open(dir, &trainer.progress)?;
    if !trainer.progress.il_done {
        trainer.run_imitation(&mut log)?;
        checkpoint::save(&trainer.checkpoint(true), &ck_path)?;
    }
    let cfg = trainer.config.train.clone();
    let mut ran = 0;
    while trainer.progress.rl_episodes_done < cfg.rl_episodes && stop_after.is_none_or(|s| ran < s) {
        trainer.run_rl_episode(&mut log)?;
        ran += 1;
        let done = trainer.progress.rl_episodes_done;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let mut policy = ModelPolicy::new(&trainer.nets, cfg.m, ActMode::Stochastic);
            let metrics = evaluate_suite(
                &mut policy,
                trainer.config.eval_episodes,
                trainer.config.n_humans,
                trainer.config.eval_base_seed,
                &trainer.config.env,
            )?
            .metrics;
            let line = format!(
                "{done},{},{},{},{}",
                metrics.success_rate,
                metrics.collision_rate,
                metrics.timeout_rate,
                metrics.avg_time.map_or(String::new(), |t| t.to_string())
            );
            log.eval_row(&mut trainer.progress, line)?;
        }
        let last = done == cfg.rl_episodes || stop_after.is_some_and(|s| ran == s);
        if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            checkpoint::save(&trainer.checkpoint(true), &ck_path)?;
        }
    }
    if cfg.rl_episodes == 0 {
        checkpoint::save(&trainer.checkpoint(true), &ck_path)?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::history::HistorySet;

    fn dummy(tag: f64) -> Transition {
        let obs = Arc::new(Observation {
            histories: vec![HistorySet::stationary(Vec2::ZERO, 0.3)],
            goal: Vec2::new(0.0, tag),
            v_pref: 1.0,
        });
        Transition {
            obs: obs.clone(),
            action: Action::ZERO,
            reward: tag,
            next_obs: obs,
            done: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..4 {
            b.push(dummy(k as f64));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().reward, 1.0);
        assert!(b.iter().all(|t| t.reward != 0.0));
    }

    #[test]
    fn train_seeds_avoid_eval_block() {
        assert!(train_case_seed(0, 0) >= 1 << 40);
        assert_ne!(train_case_seed(1, 0), train_case_seed(0, 0));
    }

    #[test]
    fn demo_returns_are_discounted_sums() {
        let env = EnvConfig::default();
        let (demos, summaries) = generate_demonstrations(1, 3, 2, &env, 0.9).unwrap();
        assert_eq!(demos.len(), summaries[0].steps);
        let last = demos.last().unwrap();
        assert!(last.transition.done);
        assert_eq!(last.discounted_return, last.transition.reward);
        let d0 = &demos[demos.len() - 2];
        assert!((d0.discounted_return - (d0.transition.reward + 0.9 * last.discounted_return)).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_names_key() {
        let cfg = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().0, "gamma");
    }
}
