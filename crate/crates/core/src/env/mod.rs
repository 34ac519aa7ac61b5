//! Episodic capture environment: a free-floating arm driven by the task-space
//! controller, a moving or stationary capture point, and for the second task
//! a rectangular base that partially blocks the approach.

mod log;
mod reward;
mod scene;
mod state;

pub use log::{StepLogger, StepRecord, LOG_SCHEMA_VERSION};
pub use reward::*;
pub use scene::*;
pub use state::*;

use crate::control::{ControlError, ControlDiagnostics, Reference, TrackingController};
use crate::robot::{link_points, manipulability, ArmSnapshot, FloatingArm, ManipulatorModel};
use crate::se3::{exp_se3, Pose, Twist};
use nalgebra::{DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Attempts allowed when sampling a valid initial scene.
pub const RESET_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("no valid initial scene after {0} attempts")]
    SeedExhausted(usize),
    #[error("step called before reset or after the episode ended")]
    NotRunning,
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Task {
    /// Follow a randomly moving capture point; no obstacle.
    Tracking,
    /// Reach a stationary capture point around a rectangular base.
    Avoidance,
}

impl Task {
    pub fn id(self) -> u8 {
        match self {
            Task::Tracking => 1,
            Task::Avoidance => 2,
        }
    }

    pub fn has_obstacle(self) -> bool {
        self == Task::Avoidance
    }
}

impl TryFrom<u8> for Task {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Task::Tracking),
            2 => Ok(Task::Avoidance),
            other => Err(format!("unknown task {other}, expected 1 or 2")),
        }
    }
}

impl From<Task> for u8 {
    fn from(t: Task) -> u8 {
        t.id()
    }
}

/// Symmetric box bounds on the commanded end-effector body twist.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub linear: f64,
    pub angular: f64,
}

impl ActionBounds {
    pub fn upper(&self) -> Vector6<f64> {
        let (l, a) = (self.linear, self.angular);
        Vector6::new(l, l, l, a, a, a)
    }

    pub fn clip(&self, v: &Vector6<f64>) -> (Vector6<f64>, bool) {
        let hi = self.upper();
        let clipped = v.zip_map(&hi, |x, h| x.clamp(-h, h));
        let changed = clipped != *v;
        (clipped, changed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub half_extents: [f64; 3],
    /// Range of the box center along the end-effector/target chord.
    pub chord_fraction: [f64; 2],
    pub max_tilt_deg: f64,
}

impl Default for ObstacleConfig {
    fn default() -> Self {
        Self {
            half_extents: [0.08, 0.08, 0.015],
            chord_fraction: [0.4, 0.7],
            max_tilt_deg: 45.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Agent decision period (s).
    pub agent_dt: f64,
    /// Controller substeps per agent step.
    pub substeps: usize,
    pub episode_cap: usize,
    /// Capture sphere radius ζ (m).
    pub capture_radius: f64,
    pub action_bounds: ActionBounds,
    /// Half-width of the uniform joint noise around the zero configuration.
    pub joint_noise: f64,
    /// Half-width of the joint noise used to place the capture point.
    pub target_joint_noise: f64,
    /// Accepted initial end-effector/target distance range (m).
    pub target_distance: [f64; 2],
    pub target_speed: f64,
    pub resample_period: f64,
    pub obstacle: ObstacleConfig,
    pub rewards: RewardConfig,
}

impl EnvConfig {
    pub fn for_task(task: Task, lambda_lim: f64) -> Self {
        let (target_distance, target_speed) = match task {
            Task::Tracking => ([0.15, 0.35], 0.02),
            Task::Avoidance => ([0.3, 0.45], 0.0),
        };
        Self {
            agent_dt: 0.1,
            substeps: 10,
            episode_cap: 500,
            capture_radius: 0.05,
            action_bounds: ActionBounds {
                linear: 0.1,
                angular: 0.1,
            },
            joint_noise: 0.2,
            target_joint_noise: 0.6,
            target_distance,
            target_speed,
            resample_period: 1.0,
            obstacle: ObstacleConfig::default(),
            rewards: RewardConfig::with_lambda_lim(lambda_lim),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if !(self.agent_dt > 0.0) || self.substeps == 0 {
            return bad("agent_dt must be positive and substeps at least 1".into());
        }
        if self.episode_cap == 0 {
            return bad("episode_cap must be at least 1".into());
        }
        if !(self.capture_radius > 0.0) {
            return bad("capture_radius must be positive".into());
        }
        if !(self.action_bounds.linear > 0.0 && self.action_bounds.angular > 0.0) {
            return bad("action bounds must be positive".into());
        }
        let [lo, hi] = self.target_distance;
        if !(0.0 < lo && lo < hi) {
            return bad(format!("target_distance range [{lo}, {hi}] is empty"));
        }
        let [f0, f1] = self.obstacle.chord_fraction;
        if !(0.0 < f0 && f0 <= f1 && f1 < 1.0) {
            return bad(format!("chord_fraction [{f0}, {f1}] must lie inside (0, 1)"));
        }
        if self.obstacle.half_extents.iter().any(|h| !(*h > 0.0)) {
            return bad("obstacle half extents must be positive".into());
        }
        if !(self.target_speed >= 0.0 && self.resample_period > 0.0) {
            return bad("target speed must be >= 0 and resample_period > 0".into());
        }
        if !(self.joint_noise >= 0.0 && self.target_joint_noise >= 0.0) {
            return bad("joint noise must be non-negative".into());
        }
        self.rewards.validate().map_err(EnvError::InvalidConfig)
    }

    pub fn substep_dt(&self) -> f64 {
        self.agent_dt / self.substeps as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub pose_error: f64,
    pub lambda: f64,
    pub min_obstacle_distance: Option<f64>,
    pub momentum_residual: f64,
    pub singularity_potential: f64,
    pub rate_clamped_substeps: usize,
    pub basis_sign_flips: usize,
    pub action_clipped: bool,
    pub fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateVector,
    pub r_c: f64,
    pub r_o: f64,
    pub captured: bool,
    pub collided: bool,
    /// True terminal event (collision, capture in the second task, or a
    /// controller fault). Bootstrapping stops here.
    pub terminal: bool,
    /// Episode cap reached without a terminal event.
    pub truncated: bool,
    pub diagnostics: StepDiagnostics,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

struct Episode {
    arm: FloatingArm,
    snap: ArmSnapshot,
    target: TargetModel,
    obstacle: Option<ObstacleModel>,
    steps: usize,
    finished: bool,
    state: StateVector,
}

pub struct Env {
    task: Task,
    cfg: EnvConfig,
    model: Arc<ManipulatorModel>,
    controller: TrackingController,
    rng: ChaCha8Rng,
    episode: Option<Episode>,
}

impl Env {
    pub fn new(
        task: Task,
        cfg: EnvConfig,
        model: Arc<ManipulatorModel>,
        controller: TrackingController,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self {
            task,
            cfg,
            model,
            controller,
            rng: ChaCha8Rng::seed_from_u64(0),
            episode: None,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Arc<ManipulatorModel> {
        &self.model
    }

    pub fn lambda_lim(&self) -> f64 {
        self.controller.singularity.lambda_lim
    }

    pub fn capture_dim(&self) -> usize {
        capture_state_len(self.model.dof())
    }

    pub fn obstacle_dim(&self) -> usize {
        if self.task.has_obstacle() {
            obstacle_state_len(self.model.dof(), self.model.link_samples, 26)
        } else {
            0
        }
    }

    pub fn arm(&self) -> Option<&FloatingArm> {
        self.episode.as_ref().map(|e| &e.arm)
    }

    pub fn target(&self) -> Option<&TargetModel> {
        self.episode.as_ref().map(|e| &e.target)
    }

    pub fn obstacle(&self) -> Option<&ObstacleModel> {
        self.episode.as_ref().and_then(|e| e.obstacle.as_ref())
    }

    pub fn state(&self) -> Option<&StateVector> {
        self.episode.as_ref().map(|e| &e.state)
    }

    pub fn steps(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.steps)
    }

    /// Samples a new initial scene from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<StateVector, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.controller.reset();
        let n = self.model.dof();
        let lambda_lim = self.lambda_lim();
        for _ in 0..RESET_ATTEMPTS {
            let phi = random_joints(&mut self.rng, n, self.cfg.joint_noise);
            let Ok(snap) = ArmSnapshot::compute(&self.model, &phi) else {
                continue;
            };
            if manipulability(&snap.jacobians.j_ee) <= lambda_lim {
                continue;
            }
            let Some(target_pos) = self.sample_target(&phi, &snap) else {
                continue;
            };
            let obstacle = if self.task.has_obstacle() {
                match self.sample_obstacle(&snap, &target_pos) {
                    Some(o) => Some(o),
                    None => continue,
                }
            } else {
                None
            };
            let motion = if self.cfg.target_speed > 0.0 {
                TargetMotion::RandomWalk {
                    speed: self.cfg.target_speed,
                    resample_period: self.cfg.resample_period,
                }
            } else {
                TargetMotion::Stationary
            };
            let mut target = TargetModel::new(target_pos, self.cfg.capture_radius, motion);
            target.start(&mut self.rng);
            let arm = FloatingArm::new(self.model.clone(), phi, Pose::identity())
                .expect("dimension checked");
            let state = observe(&arm, &snap, &target, obstacle.as_ref());
            self.episode = Some(Episode {
                arm,
                snap,
                target,
                obstacle,
                steps: 0,
                finished: false,
                state: state.clone(),
            });
            return Ok(state);
        }
        self.episode = None;
        Err(EnvError::SeedExhausted(RESET_ATTEMPTS))
    }

    fn sample_target(&mut self, phi: &DVector<f64>, snap: &ArmSnapshot) -> Option<Vector3<f64>> {
        let n = phi.len();
        let offset = random_joints(&mut self.rng, n, self.cfg.target_joint_noise);
        let reach = ArmSnapshot::compute(&self.model, &(phi + offset)).ok()?;
        let p = reach.end_effector().position;
        let d = (p - snap.end_effector().position).norm();
        let [lo, hi] = self.cfg.target_distance;
        (lo..=hi).contains(&d).then_some(p)
    }

    fn sample_obstacle(&mut self, snap: &ArmSnapshot, target: &Vector3<f64>) -> Option<ObstacleModel> {
        let oc = &self.cfg.obstacle;
        let p_ee = snap.end_effector().position;
        let frac = self.rng.random_range(oc.chord_fraction[0]..=oc.chord_fraction[1]);
        let center = p_ee + (target - p_ee) * frac;
        // align the thin axis with the chord, then tilt
        let chord = (target - p_ee).normalize();
        let align = crate::se3::Rotation::from_two_vectors(&Vector3::z(), &chord);
        let tilt = random_tilt(&mut self.rng, oc.max_tilt_deg.to_radians());
        let spin = crate::se3::Rotation::rot_z(self.rng.random_range(0.0..std::f64::consts::TAU));
        let rotation = align.compose(&tilt).compose(&spin);
        let obstacle = ObstacleModel::new(Pose::new(rotation, center), Vector3::from(oc.half_extents));

        let rw = &self.cfg.rewards;
        if box_distance(&obstacle, target) < self.cfg.capture_radius + rw.k_o5 {
            return None;
        }
        let positions: Vec<Vector3<f64>> = snap.body_poses.iter().map(|g| g.position).collect();
        let links = link_points(&positions, self.model.link_samples);
        let surface = obstacle_surface_points(&obstacle);
        let start = reward_obstacle(&links, &surface, rw);
        (start.min_distance > rw.k_o2 && box_distance(&obstacle, &p_ee) > rw.k_o2).then_some(obstacle)
    }

    /// Applies one agent action for `agent_dt` seconds.
    pub fn step(&mut self, action: &Twist) -> Result<StepOutcome, EnvError> {
        let cfg = &self.cfg;
        let ep = match self.episode.as_mut() {
            Some(ep) if !ep.finished => ep,
            _ => return Err(EnvError::NotRunning),
        };
        let (a, action_clipped) = cfg.action_bounds.clip(&action.0);
        let a = Twist(a);
        let dt = cfg.substep_dt();
        let start = ep.arm.ee_world_pose(&ep.snap);

        let mut diag = StepDiagnostics {
            action_clipped,
            ..Default::default()
        };
        let mut last = ControlDiagnostics::default();
        for k in 0..cfg.substeps {
            let reference = Reference {
                pose: start.compose(&exp_se3(&a, k as f64 * dt)),
                twist: a,
            };
            let rates = match self.controller.joint_rates(&ep.arm, &ep.snap, &reference, dt) {
                Ok((rates, d)) => {
                    diag.rate_clamped_substeps += d.rate_clamped as usize;
                    diag.basis_sign_flips += d.basis_sign_flip as usize;
                    last = d;
                    rates
                }
                Err(e) => {
                    diag.fault = Some(fault_label(&e));
                    break;
                }
            };
            let residual = ep.arm.apply_joint_rates(&rates, &ep.snap, dt);
            diag.momentum_residual = diag.momentum_residual.max(residual);
            ep.target.advance(dt, &mut self.rng);
            match ep.arm.snapshot() {
                Ok(s) => ep.snap = s,
                Err(e) => {
                    diag.fault = Some(fault_label(&ControlError::from(e)));
                    break;
                }
            }
        }
        ep.steps += 1;

        let lambda = manipulability(&ep.snap.jacobians.j_ee);
        diag.lambda = lambda;
        diag.pose_error = last.pose_error;
        diag.singularity_potential = last.potential;

        let state = observe(&ep.arm, &ep.snap, &ep.target, ep.obstacle.as_ref());
        let p_ee = ep.arm.ee_world_pose(&ep.snap).position;
        let capture = reward_capture(&p_ee, &ep.target.position(), cfg.capture_radius, lambda, &cfg.rewards);
        let (r_o, collided) = match &ep.obstacle {
            Some(ob) => {
                let links = world_link_points(&ep.arm, &ep.snap);
                let r = reward_obstacle(&links, &obstacle_surface_points(ob), &cfg.rewards);
                diag.min_obstacle_distance = Some(r.min_distance);
                (r.total, r.collided)
            }
            None => (0.0, false),
        };
        let terminal = collided
            || diag.fault.is_some()
            || (capture.captured && self.task == Task::Avoidance);
        let truncated = !terminal && ep.steps >= cfg.episode_cap;
        ep.finished = terminal || truncated;
        ep.state = state.clone();
        Ok(StepOutcome {
            next_state: state,
            r_c: capture.total,
            r_o,
            captured: capture.captured,
            collided,
            terminal,
            truncated,
            diagnostics: diag,
        })
    }
}

fn fault_label(e: &ControlError) -> String {
    e.to_string()
}

fn random_joints(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        if half_width > 0.0 {
            rng.random_range(-half_width..=half_width)
        } else {
            0.0
        }
    })
}

/// Euclidean distance from a point to the solid box (zero inside).
pub fn box_distance(obstacle: &ObstacleModel, p: &Vector3<f64>) -> f64 {
    let local = obstacle.pose.inverse().transform_point(p);
    let outside = local.abs() - obstacle.half_extents;
    outside.map(|x| x.max(0.0)).norm()
}

fn world_link_points(arm: &FloatingArm, snap: &ArmSnapshot) -> Vec<Vector3<f64>> {
    let positions: Vec<Vector3<f64>> = arm.world_poses(snap).iter().map(|g| g.position).collect();
    link_points(&positions, arm.model().link_samples)
}

fn frame_state(pose: &Pose, body_twist: &Vector6<f64>) -> FrameState {
    let r = pose.rotation.matrix();
    FrameState {
        position: pose.position,
        velocity: r * body_twist.fixed_rows::<3>(0),
        euler: pose.rotation.euler_zyx(),
        angular_velocity: r * body_twist.fixed_rows::<3>(3),
    }
}

fn observe(
    arm: &FloatingArm,
    snap: &ArmSnapshot,
    target: &TargetModel,
    obstacle: Option<&ObstacleModel>,
) -> StateVector {
    let joints = arm.joints();
    let ee_pose = arm.ee_world_pose(snap);
    let ee_twist = &snap.jacobians.j_ee * &joints.phi_dot;
    let capture = CaptureFields {
        phi: joints.phi.clone(),
        phi_dot: joints.phi_dot.clone(),
        ee: frame_state(&ee_pose, &Vector6::from_column_slice(ee_twist.as_slice())),
        target: FrameState {
            position: target.pose.position,
            velocity: target.twist.linear(),
            euler: target.pose.rotation.euler_zyx(),
            angular_velocity: target.twist.angular(),
        },
    };
    let fields = obstacle.map(|ob| ObstacleFields {
        center: ob.center(),
        link_points: world_link_points(arm, snap),
        surface_points: obstacle_surface_points(ob),
    });
    assemble_state(&capture, fields.as_ref())
}
