use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crowdnav::agent::{ActMode, AgentNetworks};
use crowdnav::checkpoint;
use crowdnav::config::{parse_config, write_atomic, RunConfig, CONFIG_ECHO};
use crowdnav::eval::{evaluate_suite, run_episode, write_report, ModelPolicy, NavPolicy, OrcaPolicy};
use crowdnav::render::{render_artifacts, RenderKind};
use crowdnav::trainer::{self, generate_demonstrations, CHECKPOINT_DIR, LATEST_CHECKPOINT};

#[derive(Parser)]
#[command(
    name = "crowdnav",
    version,
    about = "Crowd navigation: train, evaluate, generate demonstrations, render figures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for everything random in this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Model,
    Orca,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Trajectory,
    Attention,
    Samples,
}

#[derive(Subcommand)]
enum Command {
    /// Imitation then reinforcement learning; resumable.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoints/latest`.
        #[arg(long)]
        resume: bool,
    },
    /// Seeded evaluation suite with per-episode CSV and summary table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        humans: Option<usize>,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyArg,
        /// Let humans see the robot.
        #[arg(long)]
        visible_robot: bool,
    },
    /// ORCA demonstrations with the robot visible to humans.
    DemoGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        humans: Option<usize>,
    },
    /// One episode rendered as an SVG figure plus its trace.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        humans: Option<usize>,
        /// Decision index for the attention and samples figures.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not key=value"))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join(CONFIG_ECHO), cfg.to_text().as_bytes())?;
    Ok(())
}

fn load_networks(path: Option<&Path>) -> Result<AgentNetworks> {
    let path = path.context("--checkpoint is required for the model policy")?;
    let ck = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.nets)
}

fn train(common: Common, resume: bool) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let dir = out_dir(&common, &cfg)?;
    cfg.out_dir = dir.display().to_string();
    let t = trainer::train(cfg, &dir, resume, None)?;
    println!(
        "trained {} RL episodes ({} updates); checkpoint at {}",
        t.progress.rl_episodes_done,
        t.progress.updates,
        dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}

fn evaluate(
    common: Common,
    checkpoint: Option<PathBuf>,
    episodes: Option<usize>,
    humans: Option<usize>,
    policy: PolicyArg,
    visible: bool,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if visible {
        cfg.env.robot_visible = true;
    }
    if let Some(s) = common.seed {
        cfg.eval_base_seed = s;
    }
    let n = episodes.unwrap_or(cfg.eval_episodes);
    let humans = humans.unwrap_or(cfg.n_humans);
    let dir = out_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let nets;
    let mut orca = OrcaPolicy;
    let mut model;
    let p: &mut dyn NavPolicy = match policy {
        PolicyArg::Orca => &mut orca,
        PolicyArg::Model => {
            nets = load_networks(checkpoint.as_deref())?;
            model = ModelPolicy::new(&nets, cfg.train.m, ActMode::Stochastic);
            &mut model
        }
    };
    let report = evaluate_suite(p, n, humans, cfg.eval_base_seed, &cfg.env)?;
    write_report(&report, &dir)?;
    print!(
        "{}",
        crowdnav::eval::summary_table(&[(report.policy.clone(), report.metrics.clone())])
    );
    Ok(())
}

fn demo_gen(common: Common, episodes: usize, humans: Option<usize>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let humans = humans.unwrap_or(cfg.n_humans);
    let dir = out_dir(&common, &cfg)?;
    echo_config(&dir, &cfg)?;
    let (demos, summaries) = generate_demonstrations(episodes, cfg.seed, humans, &cfg.env, cfg.train.gamma)?;
    let mut text = String::from("episode,seed,outcome,steps,return\n");
    for (k, s) in summaries.iter().enumerate() {
        text.push_str(&format!(
            "{k},{},{},{},{}\n",
            s.seed,
            s.event.label(),
            s.steps,
            s.undiscounted_return
        ));
    }
    write_atomic(&dir.join("demos.csv"), text.as_bytes())?;
    let mut steps = String::from("step,action_dx,action_dy,reward,done,discounted_return\n");
    for (i, d) in demos.iter().enumerate() {
        let t = &d.transition;
        steps.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            t.action.dx, t.action.dy, t.reward, t.done, d.discounted_return
        ));
    }
    write_atomic(&dir.join("demo_steps.csv"), steps.as_bytes())?;
    let ok = summaries.iter().filter(|s| s.event.label() == "reached_goal").count();
    println!(
        "{} demonstration episodes, {} transitions, success rate {:.3}",
        summaries.len(),
        demos.len(),
        ok as f64 / summaries.len() as f64
    );
    Ok(())
}

fn render(
    common: Common,
    kind: KindArg,
    policy: PolicyArg,
    checkpoint: Option<PathBuf>,
    humans: Option<usize>,
    step: usize,
) -> Result<()> {
    let cfg = load_config(&common)?;
    let case = common.seed.unwrap_or(cfg.eval_base_seed);
    let humans = humans.unwrap_or(cfg.n_humans);
    let dir = out_dir(&common, &cfg)?;
    let figures = dir.join("figures");
    fs::create_dir_all(&figures).with_context(|| format!("creating {}", figures.display()))?;
    let kind = match kind {
        KindArg::Trajectory => RenderKind::Trajectory,
        KindArg::Attention => RenderKind::Attention,
        KindArg::Samples => RenderKind::Samples,
    };
    let result = match policy {
        PolicyArg::Orca => run_episode(&mut OrcaPolicy, case, humans, &cfg.env)?,
        PolicyArg::Model => {
            let nets = load_networks(checkpoint.as_deref())?;
            let mut p = ModelPolicy::new(&nets, cfg.train.m, ActMode::Stochastic);
            run_episode(&mut p, case, humans, &cfg.env)?
        }
    };
    let name = match kind {
        RenderKind::Trajectory => format!("trajectory_seed{case}.svg"),
        RenderKind::Attention => format!("attention_seed{case}_step{step}.svg"),
        RenderKind::Samples => format!("samples_seed{case}_step{step}.svg"),
    };
    let path = figures.join(name);
    render_artifacts(&result, kind, step, &path)?;
    write_atomic(
        &figures.join(format!("trace_seed{case}.txt")),
        result.trace.to_text().as_bytes(),
    )?;
    println!("{} ({}, {:.2} s)", path.display(), result.outcome.label(), result.time);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => train(common, resume),
        Command::Evaluate {
            common,
            checkpoint,
            episodes,
            humans,
            policy,
            visible_robot,
        } => evaluate(common, checkpoint, episodes, humans, policy, visible_robot),
        Command::DemoGen {
            common,
            episodes,
            humans,
        } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            demo_gen(common, episodes, humans)
        }
        Command::Render {
            common,
            kind,
            policy,
            checkpoint,
            humans,
            step,
        } => render(common, kind, policy, checkpoint, humans, step),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
