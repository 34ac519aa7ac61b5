//! Experiment orchestration: training runs, evaluation and curve export.

mod config;
pub mod metrics;

pub use config::*;
pub use metrics::{emit_curves, CurveFiles, EpisodeRow, IntervalRow};

use crate::agent::{AgentError, Batch, Checkpoint, Experience, PerState, Td3Agent, TrainMetrics};
use crate::env::{Env, EnvError, StateVector, Task};
use crate::se3::Twist;
use metrics::{CsvLog, EPISODE_COLUMNS, INTERVAL_COLUMNS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("capture-critic checkpoint not found: {}", .0.display())]
    CheckpointMissing(PathBuf),
    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ConfigInvalid(_) => "ConfigInvalid",
            Self::CheckpointMissing(_) => "CheckpointMissing",
            Self::CheckpointCorrupt { .. } => "CheckpointCorrupt",
            Self::SchemaMismatch(_) => "SchemaMismatch",
            Self::Io { .. } => "Io",
            Self::Csv(_) => "Csv",
            Self::Env(_) => "Env",
            Self::Agent(_) => "Agent",
        }
    }
}

/// Episode counts as a success: any capture in the first task, a capture
/// without collision in the second.
fn episode_success(task: Task, captured_any: bool, captured_terminal: bool) -> bool {
    match task {
        Task::Tracking => captured_any,
        Task::Avoidance => captured_terminal,
    }
}

/// Per-seed result of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub task: u8,
    pub seed: u64,
    pub episodes: usize,
    pub returns_c: Vec<f64>,
    pub returns_o: Vec<f64>,
    pub successes: Vec<bool>,
    pub intervals: Vec<IntervalRow>,
    /// First episode closing an interval with success rate ≥ 0.8.
    pub convergence_episode: Option<u64>,
    /// SHA-256 of the first-task checkpoint file a second-task run started from.
    pub capture_checkpoint_sha256: Option<String>,
    pub metrics_path: PathBuf,
    pub intervals_path: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    /// Only field that differs between identical runs.
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => HarnessError::CheckpointMissing(path.to_path_buf()),
        _ => HarnessError::io(path, e),
    })?;
    Checkpoint::decode(&bytes).map_err(|e| HarnessError::CheckpointCorrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), HarnessError> {
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ck.encode()).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn make_env(cfg: &ExperimentConfig) -> Result<Env, HarnessError> {
    Ok(Env::new(cfg.task, cfg.env.clone(), cfg.model.clone(), cfg.controller())?)
}

/// Independent random streams of one run.
struct Streams {
    init: ChaCha8Rng,
    train: ChaCha8Rng,
    episodes: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(1),
            train: stream(2),
            episodes: stream(3),
        }
    }
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    c: [f64; 2],
    o: [f64; 2],
    has_o: bool,
    actor_n: usize,
    actor: f64,
}

impl LossAccumulator {
    fn add(&mut self, m: &TrainMetrics) {
        self.n += 1;
        for k in 0..2 {
            self.c[k] += m.losses.capture[k];
        }
        if let Some(o) = m.losses.obstacle {
            self.has_o = true;
            for k in 0..2 {
                self.o[k] += o[k];
            }
        }
        if let Some(j) = m.actor_objective {
            self.actor_n += 1;
            self.actor += j;
        }
    }

    fn mean(&self, sum: f64, present: bool) -> Option<f64> {
        (self.n > 0 && present).then(|| sum / self.n as f64)
    }
}

fn build_agent(
    cfg: &ExperimentConfig,
    env: &Env,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Td3Agent, Option<String>), HarnessError> {
    match cfg.task {
        Task::Tracking => Ok((Td3Agent::new(cfg.td3.clone(), env.capture_dim(), 0, rng), None)),
        Task::Avoidance => {
            let path = cfg
                .capture_checkpoint_for(seed)
                .ok_or_else(|| HarnessError::CheckpointMissing(PathBuf::from("<capture_checkpoint not set>")))?;
            let source = load_checkpoint(&path)?;
            let hash = sha256_file(&path)?;
            let agent = Td3Agent::for_obstacle_task(
                cfg.td3.clone(),
                &source.agent.capture,
                env.capture_dim(),
                env.obstacle_dim(),
                rng,
            )?;
            Ok((agent, Some(hash)))
        }
    }
}

fn uniform_action(bounds: &nalgebra::Vector6<f64>, rng: &mut ChaCha8Rng) -> Twist {
    Twist(nalgebra::Vector6::from_fn(|i, _| rng.random_range(-bounds[i]..=bounds[i])))
}

/// Options that do not belong in the experiment file.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint's networks and counters. Replay buffers
    /// start empty.
    pub resume: Option<PathBuf>,
}

/// Trains every configured seed in turn.
pub fn run_training(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<RunSummary>, HarnessError> {
    cfg.seeds.iter().map(|&s| train_seed(cfg, s, opts)).collect()
}

/// One training run. Everything written except `summary.json`'s wall-clock
/// field is a function of the configuration and the seed.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, opts: &TrainOptions) -> Result<RunSummary, HarnessError> {
    let started = Instant::now();
    let dir = cfg.run_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut env = make_env(cfg)?;
    let mut rng = Streams::new(seed);
    let (mut agent, capture_hash) = build_agent(cfg, &env, seed, &mut rng.init)?;
    let mut per = PerState::new(cfg.per);
    let mut first_episode = 0u64;
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint(path)?;
        if ck.agent.schema != agent.schema {
            return Err(HarnessError::SchemaMismatch(format!(
                "checkpoint schema {:?} does not match this task {:?}",
                ck.agent.schema, agent.schema
            )));
        }
        agent = ck.agent;
        per.lambda = ck.lambda;
        per.psi = ck.psi;
        per.shortfall = ck.shortfall;
        first_episode = ck.episodes;
    }

    let metrics_path = dir.join("metrics.csv");
    let intervals_path = dir.join("intervals.csv");
    let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| HarnessError::io(p, e));
    let mut metrics = CsvLog::new(open(&metrics_path)?, &EPISODE_COLUMNS)?;
    let mut intervals = CsvLog::new(open(&intervals_path)?, &INTERVAL_COLUMNS)?;

    let bounds = cfg.env.action_bounds.upper();
    let mut summary = RunSummary {
        task: cfg.task.id(),
        seed,
        episodes: 0,
        returns_c: Vec::new(),
        returns_o: Vec::new(),
        successes: Vec::new(),
        intervals: Vec::new(),
        convergence_episode: None,
        capture_checkpoint_sha256: capture_hash,
        metrics_path: metrics_path.clone(),
        intervals_path: intervals_path.clone(),
        final_checkpoint: None,
        wall_clock_s: 0.0,
    };
    let mut total_steps = 0usize;
    let checkpoint = |agent: &Td3Agent, per: &PerState, episodes: u64| Checkpoint {
        agent: agent.clone(),
        episodes,
        lambda: per.lambda,
        psi: per.psi,
        shortfall: per.shortfall,
    };

    for episode in first_episode..first_episode + cfg.episodes as u64 {
        let mut state = env.reset(rng.episodes.random())?;
        let mut row = EpisodeRow {
            episode,
            steps: 0,
            return_c: 0.0,
            return_o: 0.0,
            success: false,
            captured_steps: 0,
            collided: false,
            fault: false,
            min_obstacle_distance: None,
            min_lambda: f64::INFINITY,
            psi: 0.0,
            lambda: 0.0,
            loss_c1: None,
            loss_c2: None,
            loss_o1: None,
            loss_o2: None,
            actor_j: None,
        };
        let mut losses = LossAccumulator::default();
        let mut captured_terminal = false;
        loop {
            let action = if total_steps < cfg.start_steps {
                uniform_action(&bounds, &mut rng.train)
            } else {
                agent.act(&state, true, &mut rng.train)?
            };
            let out = env.step(&action)?;
            total_steps += 1;
            row.steps += 1;
            row.return_c += out.r_c;
            row.return_o += out.r_o;
            row.captured_steps += out.captured as usize;
            row.collided |= out.collided;
            row.fault |= out.diagnostics.fault.is_some();
            row.min_lambda = row.min_lambda.min(out.diagnostics.lambda);
            if let Some(d) = out.diagnostics.min_obstacle_distance {
                row.min_obstacle_distance = Some(row.min_obstacle_distance.map_or(d, |m: f64| m.min(d)));
            }
            captured_terminal |= out.terminal && out.captured && !out.collided;
            per.push(Experience {
                s_c: state.s_c,
                s_o: state.s_o,
                action: std::array::from_fn(|i| action.0[i]),
                r_c: out.r_c,
                r_o: out.r_o,
                next_s_c: out.next_state.s_c.clone(),
                next_s_o: out.next_state.s_o.clone(),
                terminal: out.terminal,
                episode,
            });
            if per.main.len() >= cfg.warmup && total_steps.is_multiple_of(cfg.train_every) {
                for _ in 0..cfg.gradient_steps {
                    let items = per.sample(cfg.td3.batch_size, &mut rng.train)?;
                    let m = agent.train_step(&Batch::from_experiences(&items), &mut rng.train)?;
                    losses.add(&m);
                }
            }
            let done = out.done();
            state = out.next_state;
            if done {
                break;
            }
        }
        row.success = episode_success(cfg.task, row.captured_steps > 0, captured_terminal);
        row.loss_c1 = losses.mean(losses.c[0], true);
        row.loss_c2 = losses.mean(losses.c[1], true);
        row.loss_o1 = losses.mean(losses.o[0], losses.has_o);
        row.loss_o2 = losses.mean(losses.o[1], losses.has_o);
        row.actor_j = (losses.actor_n > 0).then(|| losses.actor / losses.actor_n as f64);

        let report = per.end_episode(episode, row.success, row.return_c + row.return_o);
        row.psi = per.psi;
        row.lambda = per.lambda;
        metrics.row(&row)?;
        if let Some(r) = report {
            let irow = IntervalRow {
                interval: summary.intervals.len() as u64,
                last_episode: episode,
                psi: r.psi,
                lambda: r.lambda,
                transferred_episodes: r.transferred_episodes.len(),
                transferred_experiences: r.transferred_experiences,
                priority_len: r.priority_len,
                shortfall: per.shortfall,
            };
            intervals.row(&irow)?;
            if summary.convergence_episode.is_none() && r.psi >= 0.8 {
                summary.convergence_episode = Some(episode);
            }
            summary.intervals.push(irow);
        }
        summary.episodes += 1;
        summary.returns_c.push(row.return_c);
        summary.returns_o.push(row.return_o);
        summary.successes.push(row.success);

        let done_episodes = episode + 1;
        if cfg.checkpoint_every > 0 && summary.episodes.is_multiple_of(cfg.checkpoint_every) {
            let p = dir.join(format!("checkpoint_ep{done_episodes:05}.bin"));
            save_checkpoint(&p, &checkpoint(&agent, &per, done_episodes))?;
        }
    }

    if cfg.episodes > 0 {
        let p = dir.join("checkpoint_final.bin");
        save_checkpoint(&p, &checkpoint(&agent, &per, first_episode + cfg.episodes as u64))?;
        summary.final_checkpoint = Some(p);
    }
    summary.wall_clock_s = started.elapsed().as_secs_f64();
    let p = dir.join("summary.json");
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    std::fs::write(&p, json).map_err(|e| HarnessError::io(&p, e))?;
    Ok(summary)
}

/// Greedy evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: u8,
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub fault_rate: f64,
    pub mean_return_c: f64,
    pub mean_return_o: f64,
    pub mean_steps: f64,
    /// Mean over episodes of the smallest link/obstacle distance.
    pub mean_min_obstacle_distance: Option<f64>,
    /// Smallest manipulability seen in any episode.
    pub min_lambda: f64,
    /// Mean over episodes of the per-episode smallest manipulability.
    pub mean_min_lambda: f64,
}

/// Runs the greedy policy of `agent` on the evaluation seeds.
pub fn evaluate_agent(cfg: &ExperimentConfig, agent: &Td3Agent, episodes: usize) -> Result<EvalReport, HarnessError> {
    let mut env = make_env(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused by greedy actions
    let (mut succ, mut coll, mut faults) = (0usize, 0usize, 0usize);
    let (mut rc, mut ro, mut steps) = (0.0, 0.0, 0.0);
    let mut dist_sum = 0.0;
    let mut dist_n = 0usize;
    let mut min_lambda = f64::INFINITY;
    let mut min_lambda_sum = 0.0;
    for i in 0..episodes {
        let mut state: StateVector = env.reset(cfg.eval.seed_base + i as u64)?;
        let mut captured_any = false;
        let mut captured_terminal = false;
        let mut collided = false;
        let mut fault = false;
        let mut ep_min_dist: Option<f64> = None;
        let mut ep_min_lambda = f64::INFINITY;
        loop {
            let a = agent.act(&state, false, &mut rng)?;
            let out = env.step(&a)?;
            rc += out.r_c;
            ro += out.r_o;
            steps += 1.0;
            captured_any |= out.captured;
            captured_terminal |= out.terminal && out.captured && !out.collided;
            collided |= out.collided;
            fault |= out.diagnostics.fault.is_some();
            ep_min_lambda = ep_min_lambda.min(out.diagnostics.lambda);
            if let Some(d) = out.diagnostics.min_obstacle_distance {
                ep_min_dist = Some(ep_min_dist.map_or(d, |m| m.min(d)));
            }
            let done = out.done();
            state = out.next_state;
            if done {
                break;
            }
        }
        succ += episode_success(cfg.task, captured_any, captured_terminal) as usize;
        coll += collided as usize;
        faults += fault as usize;
        if let Some(d) = ep_min_dist {
            dist_sum += d;
            dist_n += 1;
        }
        min_lambda = min_lambda.min(ep_min_lambda);
        min_lambda_sum += ep_min_lambda;
    }
    let n = episodes.max(1) as f64;
    Ok(EvalReport {
        task: cfg.task.id(),
        episodes,
        success_rate: succ as f64 / n,
        collision_rate: coll as f64 / n,
        fault_rate: faults as f64 / n,
        mean_return_c: rc / n,
        mean_return_o: ro / n,
        mean_steps: steps / n,
        mean_min_obstacle_distance: (dist_n > 0).then(|| dist_sum / dist_n as f64),
        min_lambda,
        mean_min_lambda: min_lambda_sum / n,
    })
}

/// Loads a checkpoint and evaluates it greedily.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, episodes: usize) -> Result<EvalReport, HarnessError> {
    let ck = load_checkpoint(checkpoint)?;
    let env = make_env(cfg)?;
    let expected = (env.capture_dim(), env.obstacle_dim());
    let got = (ck.agent.schema.capture_dim, ck.agent.schema.obstacle_dim);
    if expected != got {
        return Err(HarnessError::SchemaMismatch(format!(
            "checkpoint expects state sizes {got:?}, task {} produces {expected:?}",
            cfg.task.id()
        )));
    }
    evaluate_agent(cfg, &ck.agent, episodes)
}
