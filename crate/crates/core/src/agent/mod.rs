//! TD3 with a capture critic pair, an optional obstacle critic pair, and
//! success-ranked prioritized replay.

mod checkpoint;
mod per;

pub use checkpoint::{critic_pair_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use per::*;

use crate::env::{ActionBounds, StateVector};
use crate::nn::{soft_update, Adam, AdamConfig, Mlp, NnError, OutputActivation, Params};
use crate::se3::Twist;
use nalgebra::{DMatrix, DVector, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("state has capture/obstacle sizes {got:?}, agent expects {expected:?}")]
    SchemaMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("replay holds {available} transitions, {needed} needed")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Exploration noise std as a fraction of each action bound.
    pub exploration_std: f64,
    /// Exploration noise clip as a fraction of each action bound.
    pub exploration_clip: f64,
    /// Target-policy smoothing std as a fraction of each action bound.
    pub target_noise_std: f64,
    /// Target-policy smoothing clip as a fraction of each action bound.
    pub target_noise_clip: f64,
    pub policy_delay: u64,
    pub alpha_c: f64,
    pub alpha_o: f64,
    pub action_bounds: ActionBounds,
    pub actor_hidden: Vec<usize>,
    pub capture_critic_hidden: Vec<usize>,
    pub obstacle_critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Multiplier of the initial weights of the actor's last layer.
    pub actor_last_layer_scale: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 64,
            exploration_std: 0.1,
            exploration_clip: 0.5,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            policy_delay: 2,
            alpha_c: 0.6,
            alpha_o: 0.4,
            action_bounds: ActionBounds {
                linear: 0.1,
                angular: 0.1,
            },
            actor_hidden: vec![800, 800],
            capture_critic_hidden: vec![400, 400],
            obstacle_critic_hidden: vec![600, 600],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            actor_last_layer_scale: 0.1,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.batch_size == 0 || self.policy_delay == 0 {
            return bad("batch_size and policy_delay must be at least 1".into());
        }
        if !(self.alpha_c > 0.0 && self.alpha_c < 1.0 && self.alpha_o > 0.0 && self.alpha_o < 1.0) {
            return bad(format!(
                "alpha_c = {} and alpha_o = {} must both lie in (0, 1)",
                self.alpha_c, self.alpha_o
            ));
        }
        if (self.alpha_c + self.alpha_o - 1.0).abs() > 1e-12 {
            return bad(format!("alpha_c + alpha_o = {} must equal 1", self.alpha_c + self.alpha_o));
        }
        for (name, v) in [
            ("exploration_std", self.exploration_std),
            ("exploration_clip", self.exploration_clip),
            ("target_noise_std", self.target_noise_std),
            ("target_noise_clip", self.target_noise_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let hidden = [&self.actor_hidden, &self.capture_critic_hidden, &self.obstacle_critic_hidden];
        if hidden.iter().any(|h| h.is_empty() || h.contains(&0)) {
            return bad("hidden layer lists must be nonempty with positive sizes".into());
        }
        if !(self.action_bounds.linear > 0.0 && self.action_bounds.angular > 0.0) {
            return bad("action bounds must be positive".into());
        }
        Ok(())
    }

    fn bounds(&self) -> Vector6<f64> {
        self.action_bounds.upper()
    }
}

/// Input sizes of the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSchema {
    pub capture_dim: usize,
    pub obstacle_dim: usize,
    /// Whether the actor sees `[s_c, s_o]` (second task) or only `s_c`.
    pub actor_sees_obstacle: bool,
}

impl AgentSchema {
    pub fn actor_input(&self) -> usize {
        self.capture_dim + if self.actor_sees_obstacle { self.obstacle_dim } else { 0 }
    }
}

/// Two critics, their targets and optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    pub optim: [Adam; 2],
    pub frozen: bool,
}

impl CriticPair {
    pub fn new<R: Rng>(input: usize, hidden: &[usize], lr: f64, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, OutputActivation::Identity, 1.0, rng);
        let q2 = Mlp::new(&sizes, OutputActivation::Identity, 1.0, rng);
        let cfg = AdamConfig::with_learning_rate(lr);
        Self {
            optim: [Adam::new(cfg, &q1), Adam::new(cfg, &q2)],
            target: [q1.clone(), q2.clone()],
            online: [q1, q2],
            frozen: false,
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for n in self.online.iter().chain(&self.target) {
            v.extend(n.flat_params());
        }
        v
    }
}

/// Minibatch in column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s_c: DMatrix<f64>,
    pub s_o: DMatrix<f64>,
    pub action: DMatrix<f64>,
    pub r_c: DVector<f64>,
    pub r_o: DVector<f64>,
    pub next_s_c: DMatrix<f64>,
    pub next_s_o: DMatrix<f64>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn from_experiences(items: &[Arc<Experience>]) -> Self {
        assert!(!items.is_empty(), "empty batch");
        let n = items.len();
        let col = |f: &dyn Fn(&Experience) -> &[f64]| {
            let rows = f(&items[0]).len();
            DMatrix::from_fn(rows, n, |i, j| f(&items[j])[i])
        };
        Self {
            s_c: col(&|e| &e.s_c),
            s_o: col(&|e| &e.s_o),
            action: col(&|e| &e.action),
            r_c: DVector::from_fn(n, |j, _| items[j].r_c),
            r_o: DVector::from_fn(n, |j, _| items[j].r_o),
            next_s_c: col(&|e| &e.next_s_c),
            next_s_o: col(&|e| &e.next_s_o),
            terminal: items.iter().map(|e| e.terminal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

/// Per-head Bellman targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub capture: DVector<f64>,
    pub obstacle: Option<DVector<f64>>,
    /// Smoothed, clipped target actions used for both heads.
    pub next_action: DMatrix<f64>,
}

/// Losses of one critic update; `None` for an absent pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CriticLosses {
    pub capture: [f64; 2],
    pub obstacle: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub losses: CriticLosses,
    /// Objective value when the actor was updated on this call.
    pub actor_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Td3Agent {
    pub config: Td3Config,
    pub schema: AgentSchema,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub actor_optim: Adam,
    pub capture: CriticPair,
    pub obstacle: Option<CriticPair>,
    /// Number of `train_step` calls so far.
    pub updates: u64,
}

impl Td3Agent {
    /// Fresh agent. With `obstacle_dim == 0` there is no obstacle pair and
    /// the actor sees only the capture state.
    pub fn new<R: Rng>(config: Td3Config, capture_dim: usize, obstacle_dim: usize, rng: &mut R) -> Self {
        let schema = AgentSchema {
            capture_dim,
            obstacle_dim,
            actor_sees_obstacle: obstacle_dim > 0,
        };
        let actor = Self::fresh_actor(&config, schema.actor_input(), rng);
        let capture = CriticPair::new(capture_dim + 6, &config.capture_critic_hidden, config.critic_lr, rng);
        let obstacle = (obstacle_dim > 0)
            .then(|| CriticPair::new(obstacle_dim + 6, &config.obstacle_critic_hidden, config.critic_lr, rng));
        Self {
            actor_optim: Adam::new(AdamConfig::with_learning_rate(config.actor_lr), &actor),
            actor_target: actor.clone(),
            actor,
            capture,
            obstacle,
            schema,
            config,
            updates: 0,
        }
    }

    fn fresh_actor<R: Rng>(config: &Td3Config, input: usize, rng: &mut R) -> Mlp {
        let mut sizes = vec![input];
        sizes.extend_from_slice(&config.actor_hidden);
        sizes.push(6);
        let bounds = config.bounds().iter().copied().collect();
        Mlp::new(
            &sizes,
            OutputActivation::TanhScaled(bounds),
            config.actor_last_layer_scale,
            rng,
        )
    }

    /// Second-task agent: the capture pair (with its targets) is taken from a
    /// trained first-task agent and frozen; the actor and the obstacle pair
    /// are new.
    pub fn for_obstacle_task<R: Rng>(
        config: Td3Config,
        trained_capture: &CriticPair,
        capture_dim: usize,
        obstacle_dim: usize,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        if trained_capture.online[0].input_dim() != capture_dim + 6 {
            return Err(AgentError::SchemaMismatch {
                expected: (capture_dim, obstacle_dim),
                got: (trained_capture.online[0].input_dim().saturating_sub(6), obstacle_dim),
            });
        }
        let mut agent = Self::new(config, capture_dim, obstacle_dim, rng);
        agent.capture = trained_capture.clone();
        agent.capture.frozen = true;
        Ok(agent)
    }

    fn check_state(&self, s: &StateVector) -> Result<(), AgentError> {
        let want_o = if self.schema.actor_sees_obstacle { self.schema.obstacle_dim } else { s.s_o.len() };
        if s.s_c.len() != self.schema.capture_dim || s.s_o.len() != want_o {
            return Err(AgentError::SchemaMismatch {
                expected: (self.schema.capture_dim, self.schema.obstacle_dim),
                got: (s.s_c.len(), s.s_o.len()),
            });
        }
        Ok(())
    }

    fn actor_input(&self, s_c: &DMatrix<f64>, s_o: &DMatrix<f64>) -> DMatrix<f64> {
        if self.schema.actor_sees_obstacle {
            stack(s_c, s_o)
        } else {
            s_c.clone()
        }
    }

    /// Deterministic policy output, optionally with clipped Gaussian
    /// exploration noise. The result always lies inside the action bounds.
    pub fn act<R: Rng>(&self, state: &StateVector, explore: bool, rng: &mut R) -> Result<Twist, AgentError> {
        self.check_state(state)?;
        let mut input = state.s_c.clone();
        if self.schema.actor_sees_obstacle {
            input.extend_from_slice(&state.s_o);
        }
        let x = DMatrix::from_vec(input.len(), 1, input);
        let y = self.actor.forward(&x)?;
        let mut a = Vector6::from_iterator(y.iter().copied());
        if explore && self.config.exploration_std > 0.0 {
            let bounds = self.config.bounds();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for i in 0..6 {
                let clip = self.config.exploration_clip * bounds[i];
                let noise = (normal.sample(rng) * self.config.exploration_std * bounds[i]).clamp(-clip, clip);
                a[i] = (a[i] + noise).clamp(-bounds[i], bounds[i]);
            }
        }
        Ok(Twist(a))
    }

    /// `y = r` for terminal transitions, otherwise
    /// `y = r + γ min_k Q'_k(s', clip(μ'(s') + ε₂))`, per head.
    pub fn critic_target<R: Rng>(&self, batch: &Batch, rng: &mut R) -> Result<Targets, AgentError> {
        let n = batch.len();
        let next_in = self.actor_input(&batch.next_s_c, &batch.next_s_o);
        let mut next_action = self.actor_target.forward(&next_in)?;
        let bounds = self.config.bounds();
        if self.config.target_noise_std > 0.0 {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for j in 0..n {
                for i in 0..6 {
                    let clip = self.config.target_noise_clip * bounds[i];
                    let eps = (normal.sample(rng) * self.config.target_noise_std * bounds[i]).clamp(-clip, clip);
                    next_action[(i, j)] += eps;
                }
            }
        }
        for j in 0..n {
            for i in 0..6 {
                next_action[(i, j)] = next_action[(i, j)].clamp(-bounds[i], bounds[i]);
            }
        }
        let head = |pair: &CriticPair, next_s: &DMatrix<f64>, r: &DVector<f64>| -> Result<DVector<f64>, AgentError> {
            let input = stack(next_s, &next_action);
            let q1 = pair.target[0].forward(&input)?;
            let q2 = pair.target[1].forward(&input)?;
            Ok(DVector::from_fn(n, |j, _| {
                if batch.terminal[j] {
                    r[j]
                } else {
                    r[j] + self.config.gamma * q1[(0, j)].min(q2[(0, j)])
                }
            }))
        };
        let capture = head(&self.capture, &batch.next_s_c, &batch.r_c)?;
        let obstacle = match &self.obstacle {
            Some(pair) => Some(head(pair, &batch.next_s_o, &batch.r_o)?),
            None => None,
        };
        Ok(Targets {
            capture,
            obstacle,
            next_action,
        })
    }

    /// One Adam step per unfrozen critic on the mean squared Bellman residual.
    /// Losses are reported for frozen pairs too.
    pub fn critic_update(&mut self, batch: &Batch, targets: &Targets) -> Result<CriticLosses, AgentError> {
        let capture = update_pair(&mut self.capture, &batch.s_c, &batch.action, &targets.capture)?;
        let obstacle = match (&mut self.obstacle, &targets.obstacle) {
            (Some(pair), Some(y)) => Some(update_pair(pair, &batch.s_o, &batch.action, y)?),
            _ => None,
        };
        Ok(CriticLosses { capture, obstacle })
    }

    /// Objective `J` and its gradient with respect to the actor parameters
    /// (ascent direction). Without an obstacle pair the capture head carries
    /// weight 1.
    pub fn actor_gradient(&self, batch: &Batch) -> Result<(f64, Params), AgentError> {
        let n = batch.len() as f64;
        let input = self.actor_input(&batch.s_c, &batch.s_o);
        let (action, cache) = self.actor.forward_cached(&input)?;
        let (w_c, w_o) = match self.obstacle {
            Some(_) => (self.config.alpha_c, self.config.alpha_o),
            None => (1.0, 0.0),
        };
        let (j_c, mut d_action) = min_pair_action_gradient(&self.capture, &batch.s_c, &action)?;
        let mut objective = w_c * j_c / n;
        d_action *= w_c / n;
        if let Some(pair) = &self.obstacle {
            if w_o != 0.0 {
                let (j_o, d_o) = min_pair_action_gradient(pair, &batch.s_o, &action)?;
                objective += w_o * j_o / n;
                d_action += d_o * (w_o / n);
            }
        }
        let (grads, _) = self.actor.backward(&cache, &d_action);
        Ok((objective, grads))
    }

    /// One ascent step on the actor. Critics are not modified.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64, AgentError> {
        let (objective, mut grads) = self.actor_gradient(batch)?;
        grads.scale(-1.0);
        self.actor_optim.step(&mut self.actor, &grads);
        Ok(objective)
    }

    /// Polyak update of the actor target and of every unfrozen critic target.
    pub fn soft_update_targets(&mut self) -> Result<(), AgentError> {
        let tau = self.config.tau;
        soft_update(&mut self.actor_target, &self.actor, tau)?;
        for pair in std::iter::once(&mut self.capture).chain(self.obstacle.as_mut()) {
            if pair.frozen {
                continue;
            }
            for k in 0..2 {
                soft_update(&mut pair.target[k], &pair.online[k], tau)?;
            }
        }
        Ok(())
    }

    /// Critic update on every call; actor and target updates on every
    /// `policy_delay`-th call.
    pub fn train_step<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<TrainMetrics, AgentError> {
        let targets = self.critic_target(batch, rng)?;
        let losses = self.critic_update(batch, &targets)?;
        self.updates += 1;
        let actor_objective = if self.updates.is_multiple_of(self.config.policy_delay) {
            let j = self.actor_update(batch)?;
            self.soft_update_targets()?;
            Some(j)
        } else {
            None
        };
        Ok(TrainMetrics {
            losses,
            actor_objective,
        })
    }
}

fn update_pair(
    pair: &mut CriticPair,
    s: &DMatrix<f64>,
    action: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<[f64; 2], AgentError> {
    let input = stack(s, action);
    let n = y.len() as f64;
    let mut losses = [0.0; 2];
    for k in 0..2 {
        let (q, cache) = pair.online[k].forward_cached(&input)?;
        let residual = DMatrix::from_fn(1, y.len(), |_, j| q[(0, j)] - y[j]);
        losses[k] = residual.norm_squared() / n;
        if !pair.frozen {
            let (grads, _) = pair.online[k].backward(&cache, &(residual * (2.0 / n)));
            pair.optim[k].step(&mut pair.online[k], &grads);
        }
    }
    Ok(losses)
}

/// `Σ_j min_k Q_k(s_j, a_j)` and its gradient with respect to the actions,
/// taken through the smaller critic (the first on ties).
fn min_pair_action_gradient(
    pair: &CriticPair,
    s: &DMatrix<f64>,
    action: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>), AgentError> {
    let input = stack(s, action);
    let n = action.ncols();
    let (q1, c1) = pair.online[0].forward_cached(&input)?;
    let (q2, c2) = pair.online[1].forward_cached(&input)?;
    let pick_first: Vec<bool> = (0..n).map(|j| q1[(0, j)] <= q2[(0, j)]).collect();
    let sum: f64 = (0..n).map(|j| q1[(0, j)].min(q2[(0, j)])).sum();
    let g1 = DMatrix::from_fn(1, n, |_, j| if pick_first[j] { 1.0 } else { 0.0 });
    let g2 = DMatrix::from_fn(1, n, |_, j| if pick_first[j] { 0.0 } else { 1.0 });
    let (_, dx1) = pair.online[0].backward(&c1, &g1);
    let (_, dx2) = pair.online[1].backward(&c2, &g2);
    let rows = s.nrows();
    let d_action = dx1.rows(rows, 6) + dx2.rows(rows, 6);
    Ok((sum, d_action))
}
